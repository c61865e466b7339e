import logging

from src.core.logger import LOGGER_NAME, AppLogger, get_application_logger


def test_logger_is_a_singleton(toolkit_services):
    logger = get_application_logger()
    assert AppLogger() is AppLogger()
    assert logger is AppLogger().get_logger()
    assert logger.name == LOGGER_NAME
    assert logger.propagate is False


def test_messages_reach_the_log_file(toolkit_services):
    logger = get_application_logger()
    logger.info("SMC_ABC_PROGRESS: logger smoke test")
    for handler in logger.handlers:
        handler.flush()
    log_file = AppLogger().log_dir / "toolkit.log"
    assert "SMC_ABC_PROGRESS: logger smoke test" in log_file.read_text(encoding="utf-8")


def test_set_level_updates_handlers(toolkit_services):
    app_logger = AppLogger()
    previous = app_logger.logger.level
    try:
        app_logger.set_level(logging.WARNING)
        assert app_logger.logger.level == logging.WARNING
        assert all(h.level == logging.WARNING for h in app_logger.logger.handlers)
    finally:
        app_logger.set_level(previous)
