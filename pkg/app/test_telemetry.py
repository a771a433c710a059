import logging

from opentelemetry.sdk.trace import TracerProvider

from app.telemetry import setup_logging, setup_tracing


class TestSetupTracing:
    """Test suite for tracer provider installation"""

    def test_disabled_by_default(self, monkeypatch):
        """Test no provider is installed without ESCELLS_TRACE"""
        monkeypatch.delenv("ESCELLS_TRACE", raising=False)
        assert setup_tracing() is None

    def test_console_exporter(self, mocker):
        """Test the console mode installs a provider globally"""
        install = mocker.patch("app.telemetry.trace.set_tracer_provider")
        provider = setup_tracing("console")
        assert isinstance(provider, TracerProvider)
        install.assert_called_once_with(provider)
        provider.shutdown()

    def test_mode_from_environment(self, monkeypatch, mocker):
        """Test the mode is read from ESCELLS_TRACE"""
        monkeypatch.setenv("ESCELLS_TRACE", " Console ")
        mocker.patch("app.telemetry.trace.set_tracer_provider")
        provider = setup_tracing()
        assert provider is not None
        provider.shutdown()

    def test_unknown_mode(self, capsys, mocker):
        """Test an unknown mode warns and leaves tracing off"""
        install = mocker.patch("app.telemetry.trace.set_tracer_provider")
        assert setup_tracing("zipkin") is None
        assert "⚠" in capsys.readouterr().out
        install.assert_not_called()


class TestSetupLogging:
    """Test suite for logging configuration"""

    def test_verbose_level(self, mocker):
        """Test verbose switches the root level to debug"""
        configure = mocker.patch("app.telemetry.logging.basicConfig")
        setup_logging(verbose=True)
        assert configure.call_args.kwargs["level"] == logging.DEBUG
