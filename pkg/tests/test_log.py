import logging

import pytest

from ernn.errors import NumericError, ValidationError
from ernn.log import LOG_LEVEL_ENV, get_log_level


@pytest.mark.parametrize("verbosity, level", [(1, logging.INFO), (2, logging.DEBUG), (5, logging.DEBUG)])
def test_flags_win(monkeypatch, verbosity, level):
    monkeypatch.setenv(LOG_LEVEL_ENV, "ERROR")
    assert get_log_level(verbosity) == level


def test_environment(monkeypatch):
    monkeypatch.setenv(LOG_LEVEL_ENV, "debug")
    assert get_log_level() == logging.DEBUG


def test_default_and_unknown(monkeypatch):
    monkeypatch.delenv(LOG_LEVEL_ENV, raising=False)
    assert get_log_level() == logging.WARNING
    monkeypatch.setenv(LOG_LEVEL_ENV, "chatty")
    assert get_log_level() == logging.WARNING


def test_error_text():
    err = ValidationError("bad topology", ["encoder[0]: hidden must be positive", "joint: missing"])
    assert str(err).splitlines() == [
        "bad topology",
        "  • encoder[0]: hidden must be positive",
        "  • joint: missing",
    ]
    assert "encoder.3" in str(NumericError("non-finite state", layer="encoder.3", step=7))
