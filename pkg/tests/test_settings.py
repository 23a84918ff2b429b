"""
Tests for process settings, logging setup and shared dependencies.
"""

import pytest

from dependencies import cleanup_dependencies, initialize_dependencies
from settings import Settings, configure_logging, load_settings


class TestSettings:
    def test_defaults(self, monkeypatch):
        monkeypatch.delenv("XVA_MAX_WORKERS", raising=False)
        settings = Settings(_env_file=None)
        assert settings.max_workers == 4
        assert settings.default_n_space == 600
        assert settings.default_n_time_per_year == 120
        assert settings.float_format == "%.10g"

    def test_environment_override(self, monkeypatch):
        monkeypatch.setenv("XVA_MAX_WORKERS", "6")
        monkeypatch.setenv("XVA_LOG_JSON", "true")
        settings = load_settings()
        assert settings.max_workers == 6
        assert settings.log_json

    def test_invalid_value_gets_hint(self, monkeypatch):
        monkeypatch.setenv("XVA_MAX_WORKERS", "0")
        with pytest.raises(ValueError) as exc:
            load_settings()
        assert "XVA_MAX_WORKERS must be a positive integer" in str(exc.value)

    @pytest.mark.parametrize("log_json", [True, False])
    def test_configure_logging(self, test_settings, log_json):
        configure_logging(test_settings.model_copy(update={"log_json": log_json}))

    def test_unknown_level_falls_back(self, test_settings):
        configure_logging(test_settings.model_copy(update={"log_level": "CHATTY"}))


class TestDependencies:
    @pytest.mark.asyncio
    async def test_lifecycle(self, test_settings):
        deps = await initialize_dependencies(test_settings, run_id="abc123")
        assert deps.run_id == "abc123"
        assert deps.grid_defaults() == {"n_space": 151, "n_time_per_year": 24}
        assert deps.executor.submit(sum, [1, 2, 3]).result() == 6
        await cleanup_dependencies(deps)
        with pytest.raises(RuntimeError):
            deps.executor.submit(sum, [1])


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
