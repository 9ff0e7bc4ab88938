# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

""" Tests for configuration loading and credentials. """

import argparse
import json
import os
import tempfile
import unittest

from pathlib import Path
from unittest.mock import patch

from policykg.__main__ import PolicyKGCommands, condition_list, parse_args
from policykg.chunker import ChunkerConfig
from policykg.config import (API_KEY_ENV, BASE_URL_ENV, TOKEN_FILE, Config,
                             ConfigError, config_from_json, get_api_key,
                             load_config, with_credentials)
from policykg.linker import LinkerConfig
from policykg.llm import ProviderConfig
from policykg.model import SchemaMode


class ConfigFromJsonTests(unittest.TestCase):
    def test_defaults(self):
        self.assertEqual(config_from_json({}), Config())
        self.assertEqual(load_config(None), Config())
        self.assertEqual(Config().chunker, ChunkerConfig(6000, 400, 4000))
        self.assertEqual(Config().linker.cosine_threshold, 0.70)
        self.assertEqual(Config().agent.max_steps, 7)

    def test_full(self):
        config = config_from_json({
            'schema_mode': 'open',
            'icl_pool': 'pool.json',
            'chunker': {'window_chars': 3000, 'overlap_chars': 200,
                        'max_chunk_chars': 2000},
            'linker': {'max_links_per_entity': 2},
            'agent': {'max_steps': 5},
            'provider': {'kind': 'mock', 'script': 'replay.json'},
            'judge_provider': {'kind': 'http', 'model_id': 'judge-model',
                               'base_url': 'http://127.0.0.1:8080/v1'},
        }, base=Path('/etc/policykg'))
        self.assertEqual(config.schema_mode, SchemaMode.OPEN)
        self.assertEqual(config.icl_pool, Path('/etc/policykg/pool.json'))
        self.assertEqual(config.chunker, ChunkerConfig(3000, 200, 2000))
        self.assertEqual(config.linker,
                         LinkerConfig(max_links_per_entity=2))
        self.assertEqual(config.agent.max_steps, 5)
        self.assertEqual(config.provider.script,
                         Path('/etc/policykg/replay.json'))
        assert config.judge_provider is not None
        self.assertEqual(config.judge_provider.model_id, 'judge-model')
        self.assertIsNone(config.judge_provider.script)

    def test_invalid(self):
        for data in ([],
                     {'colour': 'red'},
                     {'schema_mode': 'half-open'},
                     {'schema_file': 42},
                     {'chunker': {'window': 10}},
                     {'chunker': {'overlap_chars': 7000}},
                     {'linker': {'cosine_threshold': 0}},
                     {'linker': []},
                     {'agent': {'max_steps': 0}},
                     {'extractor': {'k_same': -1}},
                     {'provider': {'kind': 'carrier-pigeon'}},
                     {'provider': {'api_key': 'secret'}}):
            with self.assertRaises(ConfigError):
                config_from_json(data)


class LoadConfigTests(unittest.TestCase):
    def test_relative_paths(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / 'policykg.json'
            with open(path, 'w') as f:
                json.dump({'schema_file': 'schema.json'}, f)
            config = load_config(path)
        self.assertEqual(config.schema_file, Path(tmpdir) / 'schema.json')

    def test_errors(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            with self.assertRaises(ConfigError):
                load_config(Path(tmpdir) / 'missing.json')
            path = Path(tmpdir) / 'broken.json'
            with open(path, 'w') as f:
                f.write('{')
            with self.assertRaises(ConfigError):
                load_config(path)


class CredentialTests(unittest.TestCase):
    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.home = Path(self.tmpdir.name)
        patcher = patch.object(Path, 'home', return_value=self.home)
        patcher.start()
        self.addCleanup(patcher.stop)
        env = patch.dict(os.environ)
        env.start()
        self.addCleanup(env.stop)
        os.environ.pop(API_KEY_ENV, None)
        os.environ.pop(BASE_URL_ENV, None)

    def tearDown(self):
        self.tmpdir.cleanup()

    def test_precedence(self):
        self.assertIsNone(get_api_key())
        with open(self.home / TOKEN_FILE, 'w') as f:
            f.write('file-key\n')
        self.assertEqual(get_api_key(), 'file-key')
        os.environ[API_KEY_ENV] = 'env-key'
        self.assertEqual(get_api_key(), 'env-key')
        self.assertEqual(get_api_key('cli-key'), 'cli-key')

    def test_empty_token_file(self):
        with open(self.home / TOKEN_FILE, 'w') as f:
            f.write('\n')
        self.assertIsNone(get_api_key())

    def test_with_credentials(self):
        provider = with_credentials(ProviderConfig(kind='http'), 'key')
        self.assertEqual(provider.api_key, 'key')
        self.assertIsNone(provider.base_url)

        os.environ[BASE_URL_ENV] = 'http://127.0.0.1:9000/v1'
        provider = with_credentials(ProviderConfig(kind='http'), None)
        self.assertEqual(provider.base_url, 'http://127.0.0.1:9000/v1')
        provider = with_credentials(
            ProviderConfig(kind='http', base_url='http://other/v1'), None)
        self.assertEqual(provider.base_url, 'http://other/v1')


class CommandLineOverrideTests(unittest.TestCase):
    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.path = Path(self.tmpdir.name) / 'policykg.json'
        with open(self.path, 'w') as f:
            json.dump({'chunker': {'window_chars': 3000,
                                   'overlap_chars': 200,
                                   'max_chunk_chars': 2000},
                       'linker': {'cosine_threshold': 0.6}}, f)

    def tearDown(self):
        self.tmpdir.cleanup()

    def get_config(self, *argv: str) -> Config:
        args = parse_args(['--provider', 'mock'] + list(argv))
        return PolicyKGCommands(args).get_config()

    def test_defaults(self):
        config = self.get_config('chunk', '-o', 'out.json', 'policy.txt')
        self.assertEqual(config.chunker, ChunkerConfig())
        self.assertEqual(config.linker, LinkerConfig())

    def test_chunker(self):
        config = self.get_config('-c', str(self.path), 'chunk',
                                 '-o', 'out.json', 'policy.txt')
        self.assertEqual(config.chunker, ChunkerConfig(3000, 200, 2000))
        config = self.get_config('-c', str(self.path), 'chunk',
                                 '--max-chunk', '1000', '-o', 'out.json',
                                 'policy.txt')
        self.assertEqual(config.chunker, ChunkerConfig(3000, 200, 1000))
        config = self.get_config('chunk', '--window', '5000',
                                 '--overlap', '500', '-o', 'out.json',
                                 'policy.txt')
        self.assertEqual(config.chunker, ChunkerConfig(5000, 500, 4000))

    def test_linker(self):
        config = self.get_config('-c', str(self.path), 'link', '-g', 'g',
                                 '--string', '0.9', '--max-links', '2')
        self.assertEqual(config.linker, LinkerConfig(0.6, 0.9, 2))
        config = self.get_config('-c', str(self.path), 'link', '-g', 'g',
                                 '--cosine', '0.75')
        self.assertEqual(config.linker.cosine_threshold, 0.75)

    def test_invalid(self):
        with self.assertRaises(SystemExit):
            self.get_config('-c', str(self.path), 'chunk',
                            '--max-chunk', '2500', '--window', '2000',
                            '-o', 'out.json', 'policy.txt')
        for argv in (('link', '-g', 'g', '--cosine', '0'),
                     ('link', '-g', 'g', '--string', '1.5'),
                     ('chunk', '--window', '-1', '-o', 'o', 'p')):
            with self.assertRaises(SystemExit):
                parse_args(list(argv))

    def test_conditions(self):
        self.assertEqual(condition_list('nc,airo'), ['NC', 'AIRO'])
        self.assertEqual(condition_list(' open , NC '), ['NC', 'OPEN'])
        for value in ('', 'kg', 'nc,,closed'):
            with self.assertRaises(argparse.ArgumentTypeError):
                condition_list(value)
        args = parse_args(['eval', '--conditions', 'airo,nc'])
        self.assertEqual(args.conditions, ['NC', 'AIRO'])
        self.assertIsNone(parse_args(['eval']).conditions)
