# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

""" Tests for document chunking. """

import json
import random
import typing
import unittest

from policykg.chunker import (FORCED_SPLIT_REASON, BoundaryProposal,
                              BoundaryProposer, ChunkerConfig,
                              ChunkerConfigError, LLMProposer,
                              ParagraphProposer, chunk_document, review,
                              scan, snap_boundary)
from policykg.llm import ReplayProvider
from policykg.model import DATA_DIR, Chunk, PolicySource
from policykg.prompts import PromptLibrary


TOY_CORPUS = DATA_DIR / 'toy_corpus'
ARTICLE_12_OFFSET = 2632

WORDS = ('risk', 'system', 'oversight', 'data', 'model', 'provider',
         'deployer', 'shall', 'ensure', 'training', 'logs', 'transparency')


def load_toy(name: str) -> PolicySource:
    with open(TOY_CORPUS / f'{name}.txt', 'r') as f:
        text = f.read()
    return PolicySource(name, text.splitlines()[0], text)


def random_document(rng: random.Random) -> str:
    paragraphs = []
    for _ in range(rng.randint(1, 30)):
        sentences = []
        for _ in range(rng.randint(1, 8)):
            words = [rng.choice(WORDS) for _ in range(rng.randint(3, 25))]
            sentences.append(' '.join(words).capitalize() + '.')
        paragraphs.append(' '.join(sentences))
    return '\n\n'.join(paragraphs) + '\n'


class RandomProposer(BoundaryProposer):
    """Proposes arbitrary offsets, including some outside the window"""

    def __init__(self, rng: random.Random) -> None:
        self.rng = rng

    def propose(self, window_text, window_start, window_end, last_boundary):
        return [BoundaryProposal(self.rng.randint(window_start - 500,
                                                  window_end + 500))
                for _ in range(self.rng.randint(0, 4))]

    def propose_splits(self, segment_text, segment_start, segment_end,
                       max_chunk_chars):
        return [BoundaryProposal(self.rng.randint(segment_start - 10,
                                                  segment_end + 10))
                for _ in range(self.rng.randint(0, 3))]


class SilentProposer(BoundaryProposer):
    def propose(self, window_text, window_start, window_end, last_boundary):
        return []

    def propose_splits(self, segment_text, segment_start, segment_end,
                       max_chunk_chars):
        return []


class ChunkAssertions(unittest.TestCase):
    def assertCovers(self,
                     chunks: typing.List[Chunk],
                     document: str,
                     source_id: str,
                     config: ChunkerConfig
                     ) -> None:
        """Chunks must tile the document in order, within size cap"""
        self.assertTrue(chunks)
        self.assertEqual(chunks[0].start_offset, 0)
        self.assertEqual(chunks[-1].end_offset, len(document))
        for i, c in enumerate(chunks, start=1):
            self.assertEqual(c.id, f'{source_id}_c{i:03d}')
            self.assertEqual(c.source_id, source_id)
            self.assertLess(c.start_offset, c.end_offset)
            self.assertLessEqual(c.end_offset - c.start_offset,
                                 config.max_chunk_chars)
            self.assertEqual(c.text, document[c.start_offset:c.end_offset])
        for prev, cur in zip(chunks, chunks[1:]):
            self.assertEqual(prev.end_offset, cur.start_offset)
        self.assertEqual(''.join(c.text for c in chunks), document)


class ChunkerConfigTests(unittest.TestCase):
    def test_default(self):
        ChunkerConfig().check()

    def test_overlap_too_large(self):
        with self.assertRaises(ChunkerConfigError):
            ChunkerConfig(window_chars=100, overlap_chars=100).check()

    def test_zero_overlap(self):
        with self.assertRaises(ChunkerConfigError):
            ChunkerConfig(overlap_chars=0).check()

    def test_max_chunk_above_window(self):
        with self.assertRaises(ChunkerConfigError):
            ChunkerConfig(window_chars=1000, overlap_chars=100,
                          max_chunk_chars=1001).check()


class SnapBoundaryTests(unittest.TestCase):
    document = 'A' * 100 + '\n\n' + 'B' * 100 + '. ' + 'C' * 100

    def test_paragraph_preferred(self):
        self.assertEqual(snap_boundary(self.document, 150), 102)

    def test_sentence_fallback(self):
        self.assertEqual(snap_boundary(self.document, 250, radius=60), 204)

    def test_nothing_in_range(self):
        self.assertEqual(snap_boundary(self.document, 50, radius=10), 50)

    def test_tie_goes_earlier(self):
        document = 'a\n\nbbbb\n\nc'
        # breaks end at 3 and 9, offset 6 is equidistant
        self.assertEqual(snap_boundary(document, 6, radius=5), 3)


class ScanTests(unittest.TestCase):
    def test_empty(self):
        with self.assertRaises(ValueError):
            scan('', ChunkerConfig(), SilentProposer())

    def test_discarded_outside_window(self):
        class FixedProposer(SilentProposer):
            def propose(self, window_text, window_start, window_end,
                        last_boundary):
                return [BoundaryProposal(window_end + 1000, 'too far'),
                        BoundaryProposal(0, 'document start')]

        document = 'x' * 50 + '\n\n' + 'y' * 50
        discarded: typing.List[BoundaryProposal] = []
        with self.assertLogs('policykg', level='WARNING'):
            accepted = scan(document, ChunkerConfig(), FixedProposer(),
                            discarded)
        self.assertEqual(accepted, [])
        self.assertEqual([p.justification for p in discarded],
                         ['too far', 'document start'])

    def test_windows_overlap(self):
        seen = []

        class RecordingProposer(SilentProposer):
            def propose(self, window_text, window_start, window_end,
                        last_boundary):
                seen.append((window_start, window_end))
                return []

        scan('z' * 2500, ChunkerConfig(1000, 200, 800), RecordingProposer())
        self.assertEqual(seen, [(0, 1000), (800, 1800), (1600, 2500)])

    def test_sorted_unique(self):
        class TwiceProposer(SilentProposer):
            def propose(self, window_text, window_start, window_end,
                        last_boundary):
                return [BoundaryProposal(min(window_end, 1500) - 5),
                        BoundaryProposal(window_start + 10)]

        document = random_document(random.Random(3)) * 3
        accepted = scan(document, ChunkerConfig(1000, 200, 800),
                        TwiceProposer())
        offsets = [p.offset for p in accepted]
        self.assertEqual(offsets, sorted(set(offsets)))
        for off in offsets:
            self.assertTrue(0 < off < len(document))


class ReviewTests(ChunkAssertions):
    def test_unsorted_boundaries(self):
        with self.assertRaises(ValueError):
            review('abcdefgh', [5, 3], ChunkerConfig(), SilentProposer())

    def test_boundary_at_edge(self):
        with self.assertRaises(ValueError):
            review('abcdefgh', [0], ChunkerConfig(), SilentProposer())
        with self.assertRaises(ValueError):
            review('abcdefgh', [8], ChunkerConfig(), SilentProposer())

    def test_forced_split(self):
        config = ChunkerConfig(window_chars=1000, overlap_chars=100,
                               max_chunk_chars=100)
        document = 'x' * 1000
        chunks = review(document, [], config, SilentProposer(), 'blob')
        self.assertCovers(chunks, document, 'blob', config)
        self.assertTrue(all(c.boundary_reason == FORCED_SPLIT_REASON
                            for c in chunks[:-1]))

    def test_single_chunk(self):
        config = ChunkerConfig()
        chunks = review('short text', [], config, SilentProposer(), 's')
        self.assertEqual(chunks, [Chunk('s_c001', 's', 0, 10, 'short text')])


class ChunkDocumentTests(ChunkAssertions):
    def test_toy_corpus_paragraph(self):
        config = ChunkerConfig()
        for name in ('eu_ai_act', 'nist_ai_rmf', 'owasp_llm'):
            source = load_toy(name)
            chunks = chunk_document(source, config, ParagraphProposer())
            self.assertCovers(chunks, source.document_text, name, config)
            self.assertGreater(len(chunks), 1)
            for c in chunks[1:]:
                self.assertEqual(
                    source.document_text[c.start_offset - 2:c.start_offset],
                    '\n\n')

    def test_deterministic(self):
        source = load_toy('eu_ai_act')
        config = ChunkerConfig(window_chars=2000, overlap_chars=300,
                               max_chunk_chars=1500)
        self.assertEqual(
            chunk_document(source, config, ParagraphProposer(1200)),
            chunk_document(source, config, ParagraphProposer(1200)))

    def test_random_documents(self):
        rng = random.Random(1234)
        for i in range(100):
            document = random_document(rng)
            window = rng.randint(300, 3000)
            config = ChunkerConfig(
                window_chars=window,
                overlap_chars=rng.randint(1, window - 1),
                max_chunk_chars=rng.randint(50, window))
            proposer: BoundaryProposer
            if i % 3 == 0:
                proposer = SilentProposer()
            elif i % 3 == 1:
                proposer = ParagraphProposer(rng.randint(100, 2000))
            else:
                proposer = RandomProposer(rng)
            chunks = chunk_document(PolicySource(f'doc{i}', '', document),
                                    config, proposer)
            self.assertCovers(chunks, document, f'doc{i}', config)

    def test_empty_document(self):
        with self.assertRaises(ValueError):
            chunk_document(PolicySource('empty', '', ''), ChunkerConfig(),
                           SilentProposer())

    def test_missing_id(self):
        with self.assertRaises(ValueError):
            chunk_document(PolicySource('', '', 'text'), ChunkerConfig(),
                           SilentProposer())


class LLMProposerTests(ChunkAssertions):
    def reply(self, *offsets: int) -> str:
        return '```json\n' + json.dumps({'boundaries': [
            {'offset': o, 'justification': f'article at {o}'}
            for o in offsets]}) + '\n```'

    def test_scripted_scan(self):
        source = load_toy('eu_ai_act')
        provider = ReplayProvider([
            {'expect_substring': 'WINDOW:',
             'respond_text': self.reply(ARTICLE_12_OFFSET)},
        ])
        config = ChunkerConfig()
        chunks = chunk_document(source, config,
                                LLMProposer(provider, PromptLibrary()))
        self.assertCovers(chunks, source.document_text, 'eu_ai_act', config)
        self.assertEqual([c.start_offset for c in chunks],
                         [0, ARTICLE_12_OFFSET])
        self.assertTrue(chunks[1].text.startswith('Article 12'))
        self.assertEqual(chunks[0].boundary_reason,
                         f'article at {ARTICLE_12_OFFSET}')
        self.assertEqual(provider.remaining, 0)

    def test_unparseable_then_review(self):
        source = load_toy('eu_ai_act')
        provider = ReplayProvider([
            {'respond_text': 'I cannot decide.'},
            {'respond_text': self.reply(ARTICLE_12_OFFSET)},
        ])
        config = ChunkerConfig()
        with self.assertLogs('policykg', level='WARNING'):
            chunks = chunk_document(source, config,
                                    LLMProposer(provider, PromptLibrary()))
        self.assertCovers(chunks, source.document_text, 'eu_ai_act', config)
        self.assertEqual(len(chunks), 2)
        self.assertEqual(provider.remaining, 0)
