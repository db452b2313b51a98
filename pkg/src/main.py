"""
MRMF Bench - многоточностная оценка ковариаций на многообразии SPD
Главный файл приложения.

Командная строка для экспериментов: сравнение оценщиков
HF, LF, EMF, LEMF и MRMF при равном бюджете, подбор λ,
сводки по CSV испытаний и самопроверка свойств.
"""

import sys
import json
import logging
import argparse
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

# Добавляем путь src в sys.path для корректных импортов
SRC_DIR = Path(__file__).parent
if str(SRC_DIR) not in sys.path:
    sys.path.insert(0, str(SRC_DIR))

from errors import (
    EXIT_CODE_DESCRIPTIONS, EXIT_CONFIG_ERROR, EXIT_OK, EXIT_RUNTIME_FAILURE,
    EXIT_SELFTEST_FAILURE, ConfigError, MrmfError,
)
from experiments.config import (
    PRESET_EXPERIMENTS, SELFTEST_SUITE, ExperimentKind, apply_environment, load_config,
    output_path,
)
from experiments.report import read_trials_csv, summarize
from experiments.runner import ExperimentRunner, RunPhase

APP_NAME = "MRMF Bench"
APP_VERSION = "1.0.0"
LOG_FILE = "mrmf_bench.log"
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


def setup_logging(verbose: bool = False):
    """Настройка логирования в консоль; файл подключается после загрузки конфигурации."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler()]
    )


@contextmanager
def log_to_directory(directory: Path):
    """Дублировать лог в файл каталога результатов эксперимента."""
    handler = logging.FileHandler(Path(directory) / LOG_FILE, encoding='utf-8')
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        yield handler
    finally:
        root.removeHandler(handler)
        handler.close()


def exit_codes_epilog() -> str:
    lines = ["Коды завершения:"]
    lines += [f"  {code}  {text}" for code, text in sorted(EXIT_CODE_DESCRIPTIONS.items())]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mrmf-bench",
        description="Многоточностная оценка ковариационных матриц: эксперименты и проверки",
        epilog=exit_codes_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Подробный лог (DEBUG)")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Выполнить эксперимент по конфигурации")
    run.add_argument("config", type=Path, help="JSON-файл конфигурации")

    summary = commands.add_parser("summarize", help="Сводка по CSV испытаний в stdout")
    summary.add_argument("csv", type=Path, help="trials.csv")

    tune = commands.add_parser("tune", help="Только пилот и подбор λ")
    tune.add_argument("config", type=Path, help="JSON-файл конфигурации")

    selftest = commands.add_parser("selftest", help="Сокращённый набор проверок свойств")
    selftest.add_argument("--seed", type=int, default=None, help="Корневое зерно")
    return parser


def _log_progress(done: int, total: int):
    step = max(1, total // 10)
    if done % step == 0 or done == total:
        logger.info(f"Выполнено {done}/{total}")


def _make_runner(config) -> ExperimentRunner:
    runner = ExperimentRunner(config, APP_VERSION)
    runner.set_callbacks(on_progress=_log_progress)
    return runner


def cmd_run(args) -> int:
    config = load_config(args.config)
    with log_to_directory(output_path(config)):
        runner = _make_runner(config)
        if config.kind == ExperimentKind.PROPERTY_SUITE:
            result = runner.run_suite()
            logger.info(f"Проверки: {sum(c.passed for c in result.checks)}/{len(result.checks)} "
                        f"пройдено, отчёт в {result.output_dir}")
            return EXIT_OK if result.passed else EXIT_SELFTEST_FAILURE
        result = runner.run()
        logger.info(f"Отчёты записаны в {result.output_dir}")
        if result.cancelled or runner.phase != RunPhase.DONE:
            return EXIT_RUNTIME_FAILURE
        return EXIT_OK


def cmd_summarize(args) -> int:
    summary = summarize(read_trials_csv(args.csv))
    print(json.dumps(summary, ensure_ascii=False, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_tune(args) -> int:
    config = load_config(args.config)
    if config.kind == ExperimentKind.PROPERTY_SUITE:
        raise ConfigError("kind: подбор λ не определён для набора проверок")
    with log_to_directory(output_path(config)):
        selected = _make_runner(config).tune_only()
    print(json.dumps(selected, ensure_ascii=False, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_selftest(args) -> int:
    preset = PRESET_EXPERIMENTS[ExperimentKind.PROPERTY_SUITE]
    config = replace(preset, name="selftest", suite=SELFTEST_SUITE)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    config = apply_environment(config)
    with log_to_directory(output_path(config)):
        result = _make_runner(config).run_suite()
    failed = [c.name for c in result.checks if not c.passed]
    if failed:
        logger.error(f"Не пройдены проверки: {', '.join(failed)}")
        return EXIT_SELFTEST_FAILURE
    logger.info(f"Все {len(result.checks)} проверок пройдены")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "summarize": cmd_summarize,
    "tune": cmd_tune,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    """Точка входа приложения."""
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)

    logger.info("=" * 50)
    logger.info(f"Запуск {APP_NAME} {APP_VERSION}: {args.command}")
    logger.info("=" * 50)

    try:
        exit_code = COMMANDS[args.command](args)
    except ConfigError as e:
        logger.error(f"Ошибка конфигурации: {e}")
        exit_code = EXIT_CONFIG_ERROR
    except MrmfError as e:
        logger.error(f"Ошибка выполнения: {e}")
        exit_code = EXIT_RUNTIME_FAILURE
    except Exception as e:
        logger.exception(f"Непредвиденная ошибка: {e}")
        exit_code = EXIT_RUNTIME_FAILURE

    logger.info(f"Завершено с кодом {exit_code}")

    return exit_code


if __name__ == "__main__":
    sys.exit(main())
