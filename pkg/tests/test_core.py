import pytest

from brwre import _pycore, core


def test_default_prefers_compiled():
    expected = "compiled" if core.HAVE_COMPILED else "python"
    assert core.backend_name() == expected


def test_environment_variable_forces_python(monkeypatch):
    monkeypatch.setenv("BRWRE_BACKEND", "python")
    assert core.backend() is _pycore


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        core.backend("fortran")


def test_missing_compiled_core_raises(monkeypatch):
    monkeypatch.setattr(core, "_compiled", None)
    with pytest.raises(ImportError):
        core.backend("compiled")
    assert core.backend() is _pycore
