"""Prefix-trie constrained autoregressive generation of target item IDs and
exhaustive candidate scoring for exact full-catalog ranking.

Every registered ID is stored in the trie followed by EOS, so an ID that is
a prefix of another remains unambiguous. At each decoding step the model's
logits are masked to the trie's valid continuations and renormalized over
that set (renormalization can be disabled for the masked-only variant).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .allocator import IdRegistry, TextualId
from .tokenizer import EOS_ID


class DuplicateId(ValueError):
    """Two registered items share one ID token sequence."""


class DeadEnd(RuntimeError):
    """Constrained decoding reached a prefix with no valid continuation."""


class UnknownId(KeyError):
    """The candidate ID is not registered in the trie."""


class TrieNode:
    __slots__ = ("children", "item_key")

    def __init__(self) -> None:
        self.children: dict[int, TrieNode] = {}
        self.item_key: str | None = None


@dataclass
class PrefixTrie:
    root: TrieNode
    size: int

    def node_at(self, prefix) -> TrieNode | None:
        node = self.root
        for token in prefix:
            node = node.children.get(int(token))
            if node is None:
                return None
        return node


def build_trie(registry: IdRegistry) -> PrefixTrie:
    """Insert every registered ID's tokens followed by EOS; the node reached
    after EOS is the terminal carrying the item key."""
    root = TrieNode()
    count = 0
    for key, tid in registry.ids.items():
        node = root
        for token in tid.tokens + (EOS_ID,):
            node = node.children.setdefault(int(token), TrieNode())
        if node.item_key is not None:
            raise DuplicateId(f"items {node.item_key!r} and {key!r} share ID {tid.text!r}")
        node.item_key = key
        count += 1
    return PrefixTrie(root=root, size=count)


def valid_next(trie: PrefixTrie, prefix) -> set[int]:
    """Token ids that may follow `prefix`; empty if `prefix` leaves the trie."""
    node = trie.node_at(prefix)
    return set(node.children) if node is not None else set()


def _node_step_logprobs(model, state, prefix: tuple[int, ...], node: TrieNode,
                        normalize: bool) -> dict[int, float]:
    """Log-probability of each valid child token at this trie node."""
    logits = model.decoder_logits(state, prefix).data
    tokens = sorted(node.children)
    sub = logits[tokens]
    if normalize:
        m = sub.max()
        lse = m + math.log(np.exp(sub - m).sum())
    else:
        m = logits.max()
        lse = m + math.log(np.exp(logits - m).sum())
    return {token: float(logit - lse) for token, logit in zip(tokens, sub)}


def constrained_distribution(model, state, prefix, trie: PrefixTrie,
                             normalize: bool = True) -> dict[int, float]:
    """Probability of each valid next token; tokens outside the valid set
    have probability exactly 0 (absent from the map)."""
    node = trie.node_at(prefix)
    if node is None or not node.children:
        raise DeadEnd(f"no valid continuation after prefix {tuple(prefix)!r}")
    step = _node_step_logprobs(model, state, tuple(int(t) for t in prefix), node, normalize)
    return {token: math.exp(lp) for token, lp in step.items()}


def score_candidate(model, prompt, tid: TextualId, trie: PrefixTrie,
                    normalize: bool = True, state=None) -> float:
    """Teacher-forced sum of log constrained probabilities along the ID's
    path, including the EOS step."""
    if state is None:
        state = model.encode(prompt.tokens)
    node = trie.root
    prefix: tuple[int, ...] = ()
    score = 0.0
    for token in tid.tokens + (EOS_ID,):
        token = int(token)
        if token not in node.children:
            raise UnknownId(f"ID {tid.text!r} is not registered")
        score += _node_step_logprobs(model, state, prefix, node, normalize)[token]
        node = node.children[token]
        prefix = prefix + (token,)
    if node.item_key is None:
        raise UnknownId(f"ID {tid.text!r} is not registered")
    return score


def rank_all(model, prompt, registry: IdRegistry, trie: PrefixTrie,
             normalize: bool = True, state=None) -> list[tuple[str, float]]:
    """Exact full-catalog ranking: every registered item scored, sorted by
    descending log-score with lexicographic item-key tie-break.

    Implemented as a depth-first walk of the trie so each distinct prefix is
    scored once; per-step distributions are identical to score_candidate's.
    """
    if not registry.ids:
        raise ValueError("registry is empty")
    if state is None:
        state = model.encode(prompt.tokens)
    results: list[tuple[str, float]] = []
    stack: list[tuple[TrieNode, tuple[int, ...], float]] = [(trie.root, (), 0.0)]
    while stack:
        node, prefix, score = stack.pop()
        step = _node_step_logprobs(model, state, prefix, node, normalize)
        for token, lp in step.items():
            child = node.children[token]
            if token == EOS_ID:
                results.append((child.item_key, score + lp))
            else:
                stack.append((child, prefix + (token,), score + lp))
    results.sort(key=lambda r: (-r[1], r[0]))
    return results


def constrained_beam_search(model, prompt, trie: PrefixTrie, beam_width: int,
                            top_n: int, normalize: bool = True,
                            state=None) -> list[tuple[str, float]]:
    """Beam search where each expansion is restricted to the trie's valid
    continuations; hypotheses complete at EOS terminals. Returns the top_n
    completed items by score, ties broken by item key."""
    if not (beam_width >= top_n >= 1):
        raise ValueError("need beam_width >= top_n >= 1")
    if state is None:
        state = model.encode(prompt.tokens)
    beams: list[tuple[tuple[int, ...], float, TrieNode]] = [((), 0.0, trie.root)]
    completed: list[tuple[str, float]] = []
    while beams:
        candidates: list[tuple[float, tuple[int, ...], int, TrieNode]] = []
        for prefix, score, node in beams:
            step = _node_step_logprobs(model, state, prefix, node, normalize)
            for token, lp in step.items():
                candidates.append((score + lp, prefix, token, node.children[token]))
        candidates.sort(key=lambda c: (-c[0], c[1] + (c[2],)))
        beams = []
        for total, prefix, token, child in candidates[:beam_width]:
            if token == EOS_ID:
                completed.append((child.item_key, total))
            else:
                beams.append((prefix + (token,), total, child))
    completed.sort(key=lambda r: (-r[1], r[0]))
    return completed[:top_n]
