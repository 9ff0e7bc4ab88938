# (c) 2026 policykg contributors
# SPDX-License-Identifier: GPL-2.0-or-later

""" Prompt template library. """

import json
import typing

from pathlib import Path

import jinja2

from policykg.model import DATA_DIR


DEFAULT_TEMPLATES_DIR = DATA_DIR / 'templates'
TEMPLATE_SUFFIX = '.j2'
TASK_INSTRUCTIONS_FILE = 'task_instructions.json'

PROMPT_DESCRIPTIONS = {
    'agent_system': 'system prompt of the graph exploration agent',
    'chunk_review': 'proposes extra split points for an oversized chunk',
    'chunk_scan': 'proposes split points within a sliding window',
    'extract_entities': 'first extraction pass: typed entities of a chunk',
    'extract_relations': 'second extraction pass: relations between '
                         'known entity ids',
    'judge': 'scores an answer for accuracy, completeness and relevance',
    'route': 'classifies a question as direct or agent retrieval',
    'synthesize': 'answers a question from evidence and examples',
}


class PromptLibrary(object):
    """
    Jinja2 prompt templates loaded from a directory

    Every template is rendered with undefined variables treated
    as errors, so a template/code mismatch fails loudly instead
    of producing a silently truncated prompt.
    """

    def __init__(self,
                 templates_dir: typing.Optional[Path] = None
                 ) -> None:
        self.templates_dir = Path(templates_dir or DEFAULT_TEMPLATES_DIR)
        self.env = jinja2.Environment(
            loader=jinja2.FileSystemLoader(str(self.templates_dir)),
            autoescape=False,
            undefined=jinja2.StrictUndefined,
            keep_trailing_newline=True,
        )
        self._task_instructions: typing.Optional[
            typing.Dict[str, str]] = None

    def names(self) -> typing.List[str]:
        return sorted(p.name[:-len(TEMPLATE_SUFFIX)]
                      for p in self.templates_dir.glob(
                          f'*{TEMPLATE_SUFFIX}'))

    def source(self, name: str) -> str:
        with open(self.templates_dir / f'{name}{TEMPLATE_SUFFIX}', 'r') as f:
            return f.read()

    def render(self, name: str, **kwargs: typing.Any) -> str:
        return self.env.get_template(
            f'{name}{TEMPLATE_SUFFIX}').render(**kwargs)

    def task_instructions(self, task_type: typing.Optional[str]) -> str:
        """Return the answer instructions for `task_type` (T1..T6)"""
        if self._task_instructions is None:
            with open(self.templates_dir / TASK_INSTRUCTIONS_FILE,
                      'r') as f:
                self._task_instructions = json.load(f)
        assert self._task_instructions is not None
        return self._task_instructions.get(
            task_type or '', self._task_instructions['default'])
