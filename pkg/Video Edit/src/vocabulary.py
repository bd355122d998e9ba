#!/usr/bin/env python3
"""
Toy prompt vocabulary
Fixed word list (colours, shapes, backgrounds, styles) and its learned embedding table
"""

import logging
import re
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn

from .errors import ParameterError

logger = logging.getLogger(__name__)

PAD_TOKEN = "<pad>"
NULL_TOKEN = "<null>"
UNK_TOKEN = "<unk>"
SPECIAL_TOKENS = (PAD_TOKEN, NULL_TOKEN, UNK_TOKEN)

# Shape colours double as the attribute classes of the fidelity classifier
COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
SHAPES = ("circle", "square", "triangle")
BACKGROUNDS = ("gray", "sand", "slate", "moss")
STYLES = ("bright", "dark", "pastel", "shiny", "matte", "painted", "sketch",
          "glowing", "striped", "dotted", "neon", "wooden")
FILLER = ("a", "the", "on", "with", "and", "in", "small", "big", "over")

MAX_PROMPT_TOKENS = 8

# RGB in [0, 1] for every colour word that can be rendered
COLOR_RGB: Dict[str, Tuple[float, float, float]] = {
    "red": (0.86, 0.12, 0.12),
    "green": (0.15, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.70),
    "orange": (0.98, 0.55, 0.05),
    "gray": (0.50, 0.50, 0.50),
    "sand": (0.76, 0.70, 0.50),
    "slate": (0.35, 0.42, 0.50),
    "moss": (0.40, 0.48, 0.30),
}


class Vocabulary:
    """Word <-> id table; unknown words map to <unk>"""

    def __init__(self, words: Optional[Sequence[str]] = None):
        if words is None:
            words = list(SPECIAL_TOKENS) + list(COLORS) + list(SHAPES) + list(BACKGROUNDS) + \
                list(STYLES) + list(FILLER)
        if list(words[:len(SPECIAL_TOKENS)]) != list(SPECIAL_TOKENS):
            raise ParameterError("vocabulary must start with the special tokens")
        if len(set(words)) != len(words):
            raise ParameterError("vocabulary words must be unique")
        self.words: List[str] = list(words)
        self.index: Dict[str, int] = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    @property
    def pad_id(self) -> int:
        return self.index[PAD_TOKEN]

    @property
    def null_id(self) -> int:
        return self.index[NULL_TOKEN]

    @property
    def unk_id(self) -> int:
        return self.index[UNK_TOKEN]

    @staticmethod
    def split(text: str) -> List[str]:
        return re.findall(r"[a-z]+", text.lower())

    def token_ids(self, text: str) -> List[int]:
        """Ids for a prompt; the empty prompt is the single null token"""
        words = self.split(text)
        if not words:
            return [self.null_id]
        if len(words) > MAX_PROMPT_TOKENS:
            logger.warning(f"⚠️  Prompt '{text}' has {len(words)} words; keeping the first {MAX_PROMPT_TOKENS}")
            words = words[:MAX_PROMPT_TOKENS]
        return [self.index.get(w, self.unk_id) for w in words]

    def unknown_words(self, text: str) -> List[str]:
        return [w for w in self.split(text) if w not in self.index]


def prompt_attributes(text: str) -> Dict[str, str]:
    """The colour and shape named in a prompt, if any (first mention wins)"""
    attributes: Dict[str, str] = {}
    for word in Vocabulary.split(text):
        if word in COLORS and "color" not in attributes:
            attributes["color"] = word
        elif word in SHAPES and "shape" not in attributes:
            attributes["shape"] = word
    return attributes


class TokenTable(nn.Module):
    """Learned embeddings for the toy vocabulary"""

    def __init__(self, vocabulary: Vocabulary, text_dim: int):
        super().__init__()
        self.vocabulary = vocabulary
        self.embedding = nn.Embedding(len(vocabulary), text_dim)
        nn.init.normal_(self.embedding.weight, std=0.5)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.embedding(ids)

    def batch_ids(self, prompts: Sequence[str]) -> Tuple[torch.Tensor, torch.Tensor]:
        """Right-padded id batch plus a key padding mask (True = padding)"""
        rows = [self.vocabulary.token_ids(p) for p in prompts]
        length = max(len(r) for r in rows)
        ids = torch.full((len(rows), length), self.vocabulary.pad_id, dtype=torch.long)
        for i, row in enumerate(rows):
            ids[i, :len(row)] = torch.tensor(row, dtype=torch.long)
        return ids, ids == self.vocabulary.pad_id


def embed_prompt(text: str, table: TokenTable) -> torch.Tensor:
    """
    Embed a prompt over the toy vocabulary

    Args:
        text: Prompt; "" yields the null prompt used for classifier-free guidance
        table: Token table of a denoiser

    Returns:
        (tokens, text_dim) embedding sequence, detached from the table
    """
    ids = torch.tensor(table.vocabulary.token_ids(text), dtype=torch.long,
                       device=table.embedding.weight.device)
    with torch.no_grad():
        return table(ids).clone()
