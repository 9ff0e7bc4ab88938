# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

""" Pipeline stages shared by the CLI and the tool server. """

import logging
import typing

from policykg.chunker import (BoundaryProposer, ChunkerConfig, LLMProposer,
                              ParagraphProposer, chunk_document)
from policykg.config import Config
from policykg.extractor import (ExtractionReport, ExtractorConfig,
                                run_extraction)
from policykg.graphstore import GraphStore
from policykg.linker import LinkerConfig, link_cross_policy
from policykg.llm import ChatProvider, Embedder, embed_graph
from policykg.model import (Chunk, KnowledgeGraph, OntologySchema,
                            PolicySource, Relation)
from policykg.prompts import PromptLibrary
from policykg.retrieval import RouteMode
from policykg.synthesis import Pipeline, load_icl_pool


PROPOSERS = ('paragraph', 'llm')

log = logging.getLogger('policykg')


def make_proposer(kind: str,
                  provider: ChatProvider,
                  prompts: PromptLibrary,
                  config: ChunkerConfig
                  ) -> BoundaryProposer:
    if kind == 'paragraph':
        return ParagraphProposer()
    elif kind == 'llm':
        return LLMProposer(provider, prompts, config.max_chunk_chars)
    raise ValueError(f'unknown boundary proposer: {kind!r}')


def chunk_sources(sources: typing.Iterable[PolicySource],
                  config: ChunkerConfig,
                  proposer: BoundaryProposer
                  ) -> typing.List[Chunk]:
    """Chunk every source, in source id order"""
    config.check()
    ret = []
    for source in sorted(sources, key=lambda s: s.id):
        ret.extend(chunk_document(source, config, proposer))
    return ret


def extract_graph(chunks: typing.Iterable[Chunk],
                  schema: OntologySchema,
                  provider: ChatProvider,
                  prompts: PromptLibrary,
                  config: ExtractorConfig = ExtractorConfig(),
                  titles: typing.Mapping[str, str] = {}
                  ) -> typing.Tuple[KnowledgeGraph, ExtractionReport]:
    """
    Build a new graph from `chunks`

    Chunks are processed source by source (sorted by source id),
    in document order within a source.
    """

    graph = KnowledgeGraph(schema)
    ordered = sorted(chunks, key=lambda c: (c.source_id, c.start_offset))
    report = run_extraction(ordered, graph, provider, prompts, config,
                            titles=titles)
    return graph, report


def link_graph(graph: KnowledgeGraph,
               config: LinkerConfig,
               embedder: typing.Optional[Embedder]
               ) -> typing.List[Relation]:
    """
    Embed missing entity embeddings and link cross-policy
    correspondences.  Without an embedder, names are compared
    by edit distance and nothing is embedded.
    """

    if embedder is not None:
        embed_graph(graph, embedder, config.embed_text)
    return link_cross_policy(graph, config, embedder)


def make_pipeline(config: Config,
                  provider: ChatProvider,
                  embedder: Embedder,
                  prompts: PromptLibrary,
                  graph: typing.Optional[KnowledgeGraph] = None,
                  chunks: typing.Mapping[str, Chunk] = {},
                  route_mode: RouteMode = RouteMode.ADAPTIVE
                  ) -> Pipeline:
    """Assemble the answering pipeline for one condition"""
    store = None
    if graph is not None:
        store = GraphStore(graph, embedder)
    return Pipeline(provider=provider,
                    embedder=embedder,
                    prompts=prompts,
                    icl_pool=load_icl_pool(config.icl_pool),
                    store=store,
                    chunks=chunks,
                    agent_config=config.agent,
                    route_mode=route_mode,
                    temperature=config.provider.temperature)
