# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

""" Configuration file and credential handling. """

import json
import os
import typing

from pathlib import Path

from policykg.chunker import ChunkerConfig, ChunkerConfigError
from policykg.extractor import ExtractorConfig
from policykg.linker import LinkerConfig
from policykg.llm import ProviderConfig
from policykg.model import SchemaMode
from policykg.retrieval import AgentConfig


API_KEY_ENV = 'POLICYKG_API_KEY'
BASE_URL_ENV = 'POLICYKG_BASE_URL'
TOKEN_FILE = '.policykg_token'
PROVIDER_KINDS = ('mock', 'http')
# api_key never comes from the config file
PROVIDER_FILE_KEYS = tuple(k for k in ProviderConfig._fields
                           if k != 'api_key')


class ConfigError(Exception):
    pass


class Config(typing.NamedTuple):
    schema_mode: SchemaMode = SchemaMode.CLOSED
    schema_file: typing.Optional[Path] = None
    templates_dir: typing.Optional[Path] = None
    icl_pool: typing.Optional[Path] = None
    chunker: ChunkerConfig = ChunkerConfig()
    extractor: ExtractorConfig = ExtractorConfig()
    linker: LinkerConfig = LinkerConfig()
    agent: AgentConfig = AgentConfig()
    provider: ProviderConfig = ProviderConfig()
    judge_provider: typing.Optional[ProviderConfig] = None


R = typing.TypeVar('R')


def _section(cls: typing.Callable[..., R],
             fields: typing.Sequence[str],
             data: typing.Any,
             name: str
             ) -> R:
    if not isinstance(data, dict):
        raise ConfigError(f'{name}: expected an object')
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f'{name}: unknown keys: '
                          f'{", ".join(sorted(unknown))}')
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f'{name}: {e}')


def _path(value: typing.Any,
          base: Path,
          name: str
          ) -> typing.Optional[Path]:
    if value is None:
        return None
    if not isinstance(value, str):
        raise ConfigError(f'{name}: expected a path string')
    return base / value


def provider_from_json(data: typing.Any,
                       base: Path,
                       name: str = 'provider'
                       ) -> ProviderConfig:
    config = _section(ProviderConfig, PROVIDER_FILE_KEYS, data, name)
    if config.kind not in PROVIDER_KINDS:
        raise ConfigError(f'{name}.kind must be one of '
                          f'{", ".join(PROVIDER_KINDS)}: {config.kind!r}')
    return config._replace(script=_path(config.script, base,
                                        f'{name}.script'))


def config_from_json(data: typing.Any,
                     base: Path = Path('.')
                     ) -> Config:
    """
    Build a Config from a parsed configuration document

    Missing keys take defaults, unknown keys raise ConfigError.
    Relative paths are resolved against `base`.
    """

    if not isinstance(data, dict):
        raise ConfigError('configuration must be a JSON object')
    unknown = set(data) - set(Config._fields)
    if unknown:
        raise ConfigError(f'unknown configuration keys: '
                          f'{", ".join(sorted(unknown))}')

    kwargs: typing.Dict[str, typing.Any] = {}
    if 'schema_mode' in data:
        try:
            kwargs['schema_mode'] = SchemaMode(data['schema_mode'])
        except ValueError:
            raise ConfigError(f'invalid schema_mode: '
                              f'{data["schema_mode"]!r}')
    for key in ('schema_file', 'templates_dir', 'icl_pool'):
        if key in data:
            kwargs[key] = _path(data[key], base, key)
    for key, cls in (('chunker', ChunkerConfig),
                     ('extractor', ExtractorConfig),
                     ('linker', LinkerConfig),
                     ('agent', AgentConfig)):
        if key in data:
            kwargs[key] = _section(cls, cls._fields, data[key], key)
    if 'provider' in data:
        kwargs['provider'] = provider_from_json(data['provider'], base)
    if data.get('judge_provider') is not None:
        kwargs['judge_provider'] = provider_from_json(
            data['judge_provider'], base, 'judge_provider')

    config = Config(**kwargs)
    check_config(config)
    return config


def check_config(config: Config) -> None:
    """Validate numeric settings.  Raises ConfigError."""
    try:
        config.chunker.check()
        config.linker.check()
        config.agent.check()
    except (ChunkerConfigError, ValueError) as e:
        raise ConfigError(str(e))
    if config.extractor.k_same < 0 or config.extractor.k_cross < 0:
        raise ConfigError('extractor context sizes must not be negative')


def load_config(path: typing.Optional[Path] = None) -> Config:
    """Load the configuration file, or return defaults if `path` is None"""
    if path is None:
        return Config()
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f'configuration file not found: {path}')
    except json.JSONDecodeError as e:
        raise ConfigError(f'{path}: invalid JSON: {e}')
    return config_from_json(data, base=Path(path).parent)


def get_api_key(cli_value: typing.Optional[str] = None
                ) -> typing.Optional[str]:
    """
    Find the provider API key: the command-line value, then
    the environment, then ~/.policykg_token.  Returns None if none
    is found.
    """

    if cli_value is not None:
        return cli_value
    env = os.environ.get(API_KEY_ENV)
    if env:
        return env
    try:
        with open(Path.home() / TOKEN_FILE, 'r') as f:
            return f.read().strip() or None
    except FileNotFoundError:
        return None


def with_credentials(provider: ProviderConfig,
                     api_key: typing.Optional[str]
                     ) -> ProviderConfig:
    """Fill in the API key and (if unset) the base URL from environment"""
    base_url = provider.base_url or os.environ.get(BASE_URL_ENV) or None
    return provider._replace(api_key=api_key, base_url=base_url)
