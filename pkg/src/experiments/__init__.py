# Эксперименты: конфигурация, исполнитель, отчёты
