# MRMF Bench - многоточностная оценка ковариаций на многообразии SPD
