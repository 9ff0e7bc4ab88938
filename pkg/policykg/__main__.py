# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

""" CLI for policykg. """

import argparse
import logging
import sys
import typing

from pathlib import Path

from policykg import __version__
from policykg.chunker import ChunkerConfigError
from policykg.config import (Config, ConfigError, get_api_key, load_config,
                             with_credentials)
from policykg.evalkit import (CONDITIONS, DEFAULT_QUESTIONS,
                              QuestionFormatError, aggregate,
                              diagnostics_summary, format_table,
                              load_questions, run_eval)
from policykg.graphstore import GraphStoreError
from policykg.llm import (ChatProvider, Embedder, ProviderError,
                          embed_graph, make_embedder, make_provider)
from policykg.model import (Chunk, KnowledgeGraph, OntologySchema,
                            SchemaMode, format_statistics, graph_statistics,
                            verify_graph)
from policykg.prompts import PromptLibrary
from policykg.retrieval import RouteMode
from policykg.server import PolicyKGServer, condition_label
from policykg.storage import (StorageError, chunk_store_path, dump_json,
                              load_chunk_store, load_chunks, load_graph,
                              load_sources, save_chunks, save_graph,
                              save_results)
from policykg.synthesis import Condition, Pipeline, run_condition
from policykg.workflow import (PROPOSERS, chunk_sources, extract_graph,
                               link_graph, make_pipeline, make_proposer)


log = logging.getLogger('policykg')


class PolicyKGCommands(object):
    args: argparse.Namespace
    config: typing.Optional[Config]
    provider: typing.Optional[ChatProvider]
    embedder: typing.Optional[Embedder]

    def __init__(self,
                 args: argparse.Namespace):
        self.args = args
        self.config = None
        self.provider = None
        self.embedder = None
        self.prompts: typing.Optional[PromptLibrary] = None

    def get_config(self) -> Config:
        """
        Load the configuration file and apply command-line overrides.
        Caches the result.  Raises SystemExit on invalid configuration.
        """

        if self.config is None:
            try:
                config = load_config(self.args.config)
            except ConfigError as e:
                log.critical(f'Invalid configuration: {e}')
                raise SystemExit(1)
            overrides = {k: v for k, v in (
                ('kind', self.args.provider),
                ('base_url', self.args.base_url),
                ('model_id', self.args.model),
                ('script', self.args.script),
            ) if v is not None}
            provider = with_credentials(
                config.provider._replace(**overrides),
                get_api_key(self.args.api_key))
            if provider.kind == 'http' and provider.api_key is None:
                log.warning('No API key provided, will run unauthenticated '
                            'requests')
                log.warning('(pass --api-key, set POLICYKG_API_KEY '
                            'or put it in ~/.policykg_token)')
            chunker = config.chunker._replace(**{k: v for k, v in (
                ('window_chars', self.args.window),
                ('overlap_chars', self.args.overlap),
                ('max_chunk_chars', self.args.max_chunk),
            ) if v is not None})
            linker = config.linker._replace(**{k: v for k, v in (
                ('cosine_threshold', self.args.cosine),
                ('string_threshold', self.args.string),
                ('max_links_per_entity', self.args.max_links),
            ) if v is not None})
            try:
                chunker.check()
                linker.check()
            except ValueError as e:
                log.critical(f'Invalid configuration: {e}')
                raise SystemExit(1)
            self.config = config._replace(provider=provider,
                                          chunker=chunker, linker=linker)
        return self.config

    def get_provider(self) -> ChatProvider:
        if self.provider is None:
            try:
                self.provider = make_provider(self.get_config().provider)
            except (ProviderError, OSError, ValueError) as e:
                log.critical(f'Unable to set up the provider: {e}')
                raise SystemExit(1)
        return self.provider

    def get_embedder(self) -> Embedder:
        if self.embedder is None:
            self.embedder = make_embedder(self.get_config().provider,
                                          self.get_provider())
        return self.embedder

    def get_judge_provider(self) -> typing.Optional[ChatProvider]:
        """Judge provider if judging was requested, None otherwise"""
        if not self.args.judge:
            return None
        config = self.get_config()
        judge_config = config.judge_provider or config.provider
        if self.args.judge_script is not None:
            judge_config = judge_config._replace(
                kind='mock', script=self.args.judge_script)
        elif config.judge_provider is None and judge_config.kind == 'mock':
            log.critical('Mock judging requires --judge-script or '
                         'a judge_provider in the configuration')
            raise SystemExit(1)
        judge_config = with_credentials(judge_config,
                                        get_api_key(self.args.api_key))
        try:
            return make_provider(judge_config)
        except (ProviderError, OSError, ValueError) as e:
            log.critical(f'Unable to set up the judge provider: {e}')
            raise SystemExit(1)

    def get_prompts(self) -> PromptLibrary:
        if self.prompts is None:
            self.prompts = PromptLibrary(self.get_config().templates_dir)
        return self.prompts

    def load_graph(self,
                   path: Path,
                   verify: bool = True
                   ) -> typing.Tuple[KnowledgeGraph,
                                     typing.Dict[str, Chunk]]:
        """
        Load a graph and its chunk store (if present).  Raises
        SystemExit if loading fails.
        """

        try:
            graph = load_graph(path, verify=verify)
            chunks_path = chunk_store_path(path)
            chunks = (load_chunks(chunks_path) if chunks_path.exists()
                      else {})
        except (OSError, StorageError) as e:
            log.critical(f'Unable to load graph: {e}')
            raise SystemExit(1)
        if not chunks:
            log.warning(f'No chunk store found for {path}')
        return graph, chunks

    def save_graph(self, graph: KnowledgeGraph, path: Path) -> None:
        try:
            save_graph(graph, path)
        except StorageError as e:
            log.critical(f'Unable to save graph: {e}')
            raise SystemExit(1)

    def chunk(self) -> int:
        config = self.get_config()
        try:
            sources = load_sources(self.args.policy)
            proposer = make_proposer(self.args.proposer,
                                     self.get_provider(),
                                     self.get_prompts(), config.chunker)
            chunks = chunk_sources(sources, config.chunker, proposer)
        except (OSError, StorageError, ChunkerConfigError,
                ProviderError) as e:
            log.critical(f'Chunking failed: {e}')
            return 1
        save_chunks(chunks, self.args.output,
                    titles={s.id: s.title for s in sources})
        print(f'{len(chunks)} chunks from {len(sources)} policies '
              f'written to {self.args.output}')
        return 0

    def extract(self) -> int:
        config = self.get_config()
        mode = (SchemaMode(self.args.schema) if self.args.schema is not None
                else config.schema_mode)
        try:
            schema = OntologySchema.for_mode(mode, config.schema_file)
            chunks, titles = load_chunk_store(self.args.chunks)
        except (OSError, StorageError) as e:
            log.critical(f'Unable to load input: {e}')
            return 1

        graph, report = extract_graph(chunks.values(), schema,
                                      self.get_provider(),
                                      self.get_prompts(), config.extractor,
                                      titles=titles)
        self.save_graph(graph, self.args.output)
        save_chunks(chunks.values(), chunk_store_path(self.args.output),
                    titles=titles)

        rejected = sum(len(c.rejected) for c in report.chunks)
        print(f'{len(graph.entities)} entities, {len(graph.relations)} '
              f'relations ({rejected} rejected, {len(report.merges)} '
              f'merged) written to {self.args.output}')
        if report.failed_chunks:
            log.error(f'Failed chunks: {", ".join(report.failed_chunks)}')
            return 1
        return 0

    def embed(self) -> int:
        config = self.get_config()
        graph, _ = self.load_graph(self.args.graph)
        try:
            count = embed_graph(graph, self.get_embedder(),
                                config.linker.embed_text)
        except ProviderError as e:
            log.critical(f'Embedding failed: {e}')
            return 1
        if count:
            self.save_graph(graph, self.args.graph)
        print(f'{count} entities embedded')
        return 0

    def link(self) -> int:
        config = self.get_config()
        graph, chunks = self.load_graph(self.args.graph)
        output = self.args.output or self.args.graph
        embedder = (None if self.args.string_similarity
                    else self.get_embedder())
        try:
            new = link_graph(graph, config.linker, embedder)
        except ProviderError as e:
            log.critical(f'Linking failed: {e}')
            return 1
        self.save_graph(graph, output)
        if output != self.args.graph and chunks:
            save_chunks(chunks.values(), chunk_store_path(output))
        print(f'{len(new)} cross-policy links added')
        return 0

    def make_pipeline(self,
                      graph: typing.Optional[KnowledgeGraph] = None,
                      chunks: typing.Mapping[str, Chunk] = {}
                      ) -> Pipeline:
        route_mode = RouteMode(self.args.force_path or 'adaptive')
        try:
            return make_pipeline(self.get_config(), self.get_provider(),
                                 self.get_embedder(), self.get_prompts(),
                                 graph, chunks, route_mode)
        except (OSError, ValueError) as e:
            log.critical(f'Unable to load the ICL pool: {e}')
            raise SystemExit(1)

    def ask(self) -> int:
        condition = Condition(self.args.condition)
        graph = None
        chunks: typing.Dict[str, Chunk] = {}
        if condition == Condition.KG:
            if self.args.graph is None:
                log.critical('--graph is required unless --condition nc')
                return 1
            graph, chunks = self.load_graph(self.args.graph)
        pipeline = self.make_pipeline(graph, chunks)
        try:
            ans = run_condition(self.args.question, condition, pipeline,
                                task_type=self.args.task_type)
        except (ProviderError, GraphStoreError) as e:
            log.critical(f'Answering failed: {e}')
            return 1
        d = ans.diagnostics
        log.info(f'Path: {d.path} (decided by {d.decided_by}), '
                 f'{d.evidence_count} evidence entities from '
                 f'{d.evidence_sources} sources, {d.tool_steps} tool steps')
        print(dump_json(ans.to_json()), end='')
        return 0

    def eval(self) -> int:
        try:
            questions = load_questions(self.args.questions,
                                       require_excerpt=bool(self.args.judge))
        except (OSError, QuestionFormatError) as e:
            log.critical(f'Unable to load questions: {e}')
            return 1

        graphs = {}
        for path in self.args.graph or []:
            graph, chunks = self.load_graph(path)
            label = condition_label(graph.schema)
            if label in graphs:
                log.critical(f'Two graphs for condition {label}')
                return 1
            graphs[label] = (graph, chunks)

        conditions = self.args.conditions
        if conditions is None:
            conditions = [c for c in CONDITIONS if c == 'NC' or c in graphs]
        for label in sorted(set(graphs) - set(conditions)):
            log.warning(f'Graph for condition {label} not evaluated')

        pipelines = {}
        for cond in conditions:
            if cond == 'NC':
                pipelines[cond] = self.make_pipeline()
            elif cond in graphs:
                pipelines[cond] = self.make_pipeline(*graphs[cond])
            else:
                log.critical(f'No graph given for condition {cond}')
                return 1

        records = run_eval(questions, conditions, self.args.runs, pipelines,
                           self.get_judge_provider(), self.get_prompts())
        table = aggregate(records)
        for line in format_table(table):
            print(line)
        for cond, summary in diagnostics_summary(records).items():
            print(f'{cond}: ' + ', '.join(f'{k}={v:.2f}'
                                          for k, v in summary.items()))
        if self.args.output is not None:
            save_results(records, table, self.args.output)
        failed = [r for r in records if r.error]
        if failed:
            log.warning(f'{len(failed)} of {len(records)} records failed')
        return 0

    def serve(self) -> int:
        config = self.get_config()
        try:
            server = PolicyKGServer(
                config, self.args.graph, self.get_provider(),
                self.get_embedder(),
                judge_provider=self.get_judge_provider(),
                questions_path=self.args.questions,
                results_path=self.args.results)
        except (OSError, StorageError) as e:
            log.critical(f'Unable to start the server: {e}')
            return 1
        server.serve(sys.stdin, sys.stdout)
        return 0

    def verify(self) -> int:
        graph, chunks = self.load_graph(self.args.graph, verify=False)
        violations = verify_graph(graph, chunks or None)
        for v in violations:
            print(f'{v.subject_id}: {v.rule}: {v.message}')
        if violations:
            log.error(f'{len(violations)} violations found')
            return 1
        log.info('Graph verified')
        return 0

    def stats(self) -> int:
        graph, _ = self.load_graph(self.args.graph)
        for line in format_statistics(graph_statistics(graph)):
            print(line)
        return 0


def positive_int(value: str) -> int:
    ret = int(value)
    if ret < 1:
        raise argparse.ArgumentTypeError(f'must be at least 1: {value}')
    return ret


def threshold(value: str) -> float:
    ret = float(value)
    if not 0 < ret <= 1:
        raise argparse.ArgumentTypeError(f'must be in (0, 1]: {value}')
    return ret


def condition_list(value: str) -> typing.List[str]:
    """Parse a comma-separated list of conditions (nc, airo, open)"""
    names = [x.strip().upper() for x in value.split(',') if x.strip()]
    if not names:
        raise argparse.ArgumentTypeError('no conditions given')
    for name in names:
        if name not in CONDITIONS:
            raise argparse.ArgumentTypeError(
                f'unknown condition: {name.lower()}')
    return [c for c in CONDITIONS if c in names]


def parse_args(argv: typing.List[str]) -> argparse.Namespace:
    argp = argparse.ArgumentParser()
    argp.add_argument('--version', action='version',
                      version=f'policykg {__version__}',
                      help='print the version and exit')
    argp.add_argument('-c', '--config', type=Path,
                      help='JSON configuration file')

    logg = argp.add_argument_group('logging')
    logg = logg.add_mutually_exclusive_group()
    logg.add_argument('-q', '--quiet', action='store_true',
                      help='disable logging')
    logg.add_argument('--log-file',
                      help='log to specified file')

    provg = argp.add_argument_group('provider configuration')
    provg.add_argument('--provider', choices=('mock', 'http'),
                       help='provider kind (overrides configuration)')
    provg.add_argument('--api-key',
                       help='API key (read from POLICYKG_API_KEY '
                            'or ~/.policykg_token by default)')
    provg.add_argument('--base-url',
                       help='base URL of the chat-completions API')
    provg.add_argument('--model',
                       help='model identifier')
    provg.add_argument('--script', type=Path,
                       help='replay script for the mock provider')

    subp = argp.add_subparsers(title='commands', dest='command')

    graphp = argparse.ArgumentParser(add_help=False)
    graphp.add_argument('-g', '--graph', type=Path, required=True,
                        help='knowledge graph file')

    answp = argparse.ArgumentParser(add_help=False)
    answg = answp.add_argument_group('answering')
    answg.add_argument('--force-path', choices=('direct', 'agent'),
                       help='bypass routing and always use this '
                            'retrieval path')

    judgp = argparse.ArgumentParser(add_help=False)
    judgg = judgp.add_argument_group('judging')
    judgg.add_argument('--judge', action='store_true',
                       help='score answers with the LLM judge')
    judgg.add_argument('--judge-script', type=Path,
                       help='replay script for a mock judge')

    chup = subp.add_parser('chunk',
                           help='split policy documents into chunks')
    chup.add_argument('-o', '--output', type=Path, required=True,
                      help='chunk store to write')
    chup.add_argument('--proposer', choices=PROPOSERS,
                      default='paragraph',
                      help='boundary proposer (default: paragraph)')
    chug = chup.add_argument_group('chunk sizes (override configuration)')
    chug.add_argument('--window', type=positive_int,
                      help='scanning window length in characters')
    chug.add_argument('--overlap', type=positive_int,
                      help='overlap of consecutive windows in characters')
    chug.add_argument('--max-chunk', type=positive_int,
                      help='maximum chunk length in characters')
    chup.add_argument('policy', nargs='+', type=Path,
                      help='policy text file(s) or directories')

    extp = subp.add_parser('extract',
                           help='extract a knowledge graph from chunks')
    extp.add_argument('--chunks', type=Path, required=True,
                      help='chunk store to read')
    extp.add_argument('-o', '--output', type=Path, required=True,
                      help='graph file to write')
    extp.add_argument('--schema', choices=('closed', 'open'),
                      help='schema mode (overrides configuration)')

    subp.add_parser('embed', parents=[graphp],
                    help='store embeddings for all entities of a graph')

    linp = subp.add_parser('link', parents=[graphp],
                           help='link corresponding entities across '
                                'policies')
    linp.add_argument('-o', '--output', type=Path,
                      help='graph file to write (default: update '
                           'in place)')
    linp.add_argument('--string-similarity', action='store_true',
                      help='compare entity names by edit distance '
                           'instead of embeddings')
    ling = linp.add_argument_group('linking (overrides configuration)')
    ling.add_argument('--cosine', type=threshold,
                      help='minimum cosine similarity of embeddings')
    ling.add_argument('--string', type=threshold,
                      help='minimum edit-distance similarity of names')
    ling.add_argument('--max-links', type=positive_int,
                      help='maximum number of links per entity')

    askp = subp.add_parser('ask', parents=[answp],
                           help='answer a single question')
    askp.add_argument('-g', '--graph', type=Path,
                      help='knowledge graph file')
    askp.add_argument('--condition', choices=('kg', 'nc'), default='kg',
                      help='answer with graph context (kg, default) '
                           'or without (nc)')
    askp.add_argument('--task-type',
                      choices=('T1', 'T2', 'T3', 'T4', 'T5', 'T6'),
                      help='task type of the question')
    askp.add_argument('question',
                      help='question to answer')

    evap = subp.add_parser('eval', parents=[answp, judgp],
                           help='evaluate conditions on a question set')
    evap.add_argument('-g', '--graph', type=Path, action='append',
                      help='graph file to evaluate (condition is taken '
                           'from its schema mode, may be repeated)')
    evap.add_argument('--questions', type=Path, default=DEFAULT_QUESTIONS,
                      help='question set (JSON Lines, default: the toy '
                           'question set)')
    evap.add_argument('--conditions', type=condition_list,
                      help='comma-separated conditions to evaluate: nc, '
                           'airo, open (default: nc and every graph '
                           'given)')
    evap.add_argument('--runs', type=positive_int, default=5,
                      help='number of runs (default: 5)')
    evap.add_argument('-o', '--output', type=Path,
                      help='results file to write')

    serp = subp.add_parser('serve', parents=[graphp, judgp],
                           help='run the JSON-RPC tool server on stdio')
    serp.add_argument('--questions', type=Path,
                      help='question set for the run_eval tool')
    serp.add_argument('--results', type=Path,
                      help='results file written by the run_eval tool')

    subp.add_parser('verify', parents=[graphp],
                    help='check graph invariants')
    subp.add_parser('stats', parents=[graphp],
                    help='print graph statistics')

    args = argp.parse_args(argv)
    if args.command is None:
        argp.error('Command must be specified')
    for name in ('force_path', 'judge', 'judge_script', 'window',
                 'overlap', 'max_chunk', 'cosine', 'string', 'max_links'):
        if not hasattr(args, name):
            setattr(args, name, None)
    return args


def main(argv: typing.List[str]) -> int:
    args = parse_args(argv)

    log.setLevel(logging.INFO)
    if args.quiet:
        log.setLevel(logging.CRITICAL)

    if args.log_file:
        ch = logging.StreamHandler()
        ch.setLevel(logging.CRITICAL)
        log.addHandler(ch)
        fh = logging.FileHandler(args.log_file)
        ff = logging.Formatter('%(asctime)s %(levelname)s %(message)s')
        fh.setFormatter(ff)
        log.propagate = False
        log.addHandler(fh)

    cmd = PolicyKGCommands(args)
    try:
        return getattr(cmd, args.command)()
    except KeyboardInterrupt:
        log.info('Exiting due to ^c')
        return 1
    except SystemExit as e:
        assert isinstance(e.code, int)
        return e.code


def setuptools_main() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == '__main__':
    setuptools_main()
