"""Textual ID allocation: diverse beam search with an escalating diversity
penalty assigns every item a short, unique, human-vocabulary ID.

Beams are partitioned into groups decoded sequentially; a group's candidate
token is penalized by lambda times the number of times earlier groups chose
that token at the same timestep (Hamming diversity). On full duplication the
penalty escalates; when it tops out, the permissible length range advances
and the penalty resets.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tokenizer import EOS_ID, PAD_ID, UNK_ID, Vocabulary

log = logging.getLogger(__name__)


class IdSpaceExhausted(RuntimeError):
    """No unique ID could be produced even by the ordinal fallback."""


@dataclass(frozen=True)
class TextualId:
    """A short token sequence (EOS-stripped) plus its decoded text."""

    tokens: tuple[int, ...]
    text: str


@dataclass(frozen=True)
class AllocatorConfig:
    groups: int = 10
    beams_per_group: int = 2
    lam_init: float = 1.0
    lam_step: float = 1.0
    lam_max: float = 10.0
    length_ranges: tuple[tuple[int, int], ...] = ((1, 10), (10, 20))
    seed: int = 0

    def __post_init__(self) -> None:
        if self.groups < 1 or self.beams_per_group < 1:
            raise ValueError("groups and beams_per_group must be >= 1")
        if self.lam_init > self.lam_max:
            raise ValueError("lam_init must not exceed lam_max")
        previous_hi = 0
        for lo, hi in self.length_ranges:
            if not (0 < lo < hi) or lo < previous_hi:
                raise ValueError(f"length ranges must be increasing and disjoint: {self.length_ranges}")
            previous_hi = hi


@dataclass(frozen=True)
class AllocationRow:
    """Per-item escalation record: the penalty and length range in force when
    the ID was accepted. range_index -1 marks the ordinal fallback."""

    key: str
    lam: float
    range_index: int

    @property
    def fallback(self) -> bool:
        return self.range_index < 0


@dataclass
class IdRegistry:
    """item -> TextualId map with pairwise-distinct ID texts."""

    ids: dict[str, TextualId]
    rows: tuple[AllocationRow, ...]
    generator_hash: str | None = None

    def stats(self, lam_init: float | None = None) -> dict[str, float]:
        """Escalation fractions; `lam_init` defaults to the smallest recorded
        penalty, which matches the allocation config whenever any item was
        accepted on the first attempt.

        An item "escalated" if it was not accepted on the very first attempt
        (its accepted penalty exceeds lam_init, or it left the first length
        range, which implies the whole first penalty ladder failed).
        """
        n = max(1, len(self.rows))
        floor = lam_init if lam_init is not None else min((r.lam for r in self.rows), default=0.0)
        escalated = sum(1 for r in self.rows if r.lam > floor or r.range_index != 0)
        extended = sum(1 for r in self.rows if r.range_index != 0)
        fallbacks = sum(1 for r in self.rows if r.fallback)
        return {
            "items": float(len(self.rows)),
            "fraction_lambda_escalated": escalated / n,
            "fraction_length_extended": extended / n,
            "fallback_count": float(fallbacks),
        }

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        for key, tid in self.ids.items():
            digest.update(key.encode("utf-8"))
            digest.update(b"\x00")
            digest.update(tid.text.encode("utf-8"))
            digest.update(b"\x01")
        return digest.hexdigest()

    def save_tsv(self, path: str | Path) -> None:
        lines = [f"#generator_hash={self.generator_hash or '-'}"]
        lines += [
            f"{row.key}\t{self.ids[row.key].text}\t{row.lam}\t{row.range_index}" for row in self.rows
        ]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load_tsv(cls, path: str | Path, vocab: Vocabulary) -> "IdRegistry":
        ids: dict[str, TextualId] = {}
        rows: list[AllocationRow] = []
        generator_hash: str | None = None
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            if line.startswith("#generator_hash="):
                value = line.split("=", 1)[1]
                generator_hash = None if value == "-" else value
                continue
            key, text, lam, range_index = line.split("\t")
            ids[key] = TextualId(tokens=tuple(vocab.encode(text)), text=text)
            rows.append(AllocationRow(key=key, lam=float(lam), range_index=int(range_index)))
        return cls(ids=ids, rows=tuple(rows), generator_hash=generator_hash)


def _step_logprobs(model, state, prefix: tuple[int, ...], cache: dict | None) -> np.ndarray:
    if cache is None:
        return model.next_token_logprobs(state, prefix)
    hit = cache.get(prefix)
    if hit is None:
        hit = model.next_token_logprobs(state, prefix)
        cache[prefix] = hit
    return hit


def diverse_beam_search(model, src_ids, vocab: Vocabulary, *, groups: int,
                        beams_per_group: int, lam: float, max_len: int,
                        min_len: int = 1, state=None,
                        logprob_cache: dict | None = None) -> list[TextualId]:
    """Return one candidate per group, in group order (possibly duplicates).

    Group g's candidate token score is its log-probability minus `lam` times
    the number of times earlier groups selected that token at the same
    timestep. PAD and UNK are banned everywhere; EOS is banned while the
    sequence is shorter than `min_len`.
    """
    if lam < 0 or max_len < 1 or min_len < 1:
        raise ValueError("lam must be >= 0 and max_len/min_len >= 1")
    if state is None:
        state = model.encode(src_ids)
    chosen_at: list[Counter] = [Counter() for _ in range(max_len)]
    results: list[TextualId] = []
    for g in range(groups):
        beams: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
        completed: list[tuple[float, tuple[int, ...]]] = []
        for t in range(max_len):
            if not beams:
                break
            candidates: list[tuple[float, tuple[int, ...], int]] = []
            for seq, score in beams:
                adjusted = _step_logprobs(model, state, seq, logprob_cache).copy()
                adjusted[PAD_ID] = -np.inf
                adjusted[UNK_ID] = -np.inf
                if len(seq) < min_len:
                    adjusted[EOS_ID] = -np.inf
                if g > 0:
                    for token, count in chosen_at[t].items():
                        adjusted[token] -= lam * count
                # stable argsort: equal scores resolve to the smaller token id
                order = np.argsort(-adjusted, kind="stable")[:beams_per_group]
                for token in order:
                    if np.isfinite(adjusted[token]):
                        candidates.append((score + adjusted[token], seq, int(token)))
            candidates.sort(key=lambda c: (-c[0], c[1] + (c[2],)))
            selected = candidates[:beams_per_group]
            beams = []
            for total, seq, token in selected:
                chosen_at[t][token] += 1
                if token == EOS_ID:
                    completed.append((total, seq))
                else:
                    beams.append((seq + (token,), total))
        completed.extend((score, seq) for seq, score in beams)  # hit max_len
        if not completed:
            raise IdSpaceExhausted("no decodable token: vocabulary has no usable entries")
        completed.sort(key=lambda c: (-c[0], c[1]))
        best = completed[0][1]
        results.append(TextualId(tokens=best, text=vocab.decode(best)))
    return results


def _decoder_capacity(model) -> int | None:
    """Longest ID the model can decode and score: max_tgt_len minus the EOS
    step consumed by teacher forcing."""
    config = getattr(model, "config", None)
    return None if config is None else config.max_tgt_len - 1


def _ordinal_tokens(position: int, vocab_size: int) -> tuple[int, ...]:
    """Encode an item's position as non-special token ids (base vocab-3)."""
    usable = vocab_size - 3
    if usable <= 0:
        raise IdSpaceExhausted("vocabulary has no non-special tokens for the ordinal fallback")
    digits = []
    remaining = position
    while True:
        digits.append(3 + remaining % usable)
        remaining //= usable
        if remaining == 0:
            break
    return tuple(reversed(digits))


def allocate_all(model, items: list[tuple[str, str]], vocab: Vocabulary,
                 config: AllocatorConfig) -> IdRegistry:
    """Allocate a unique textual ID for every (item_key, flattened_text).

    Items are processed in input order; each starts at (lam_init, first
    length range) and escalates on full duplication. The ordinal fallback is
    recorded per item and logged, never silent.
    """
    if not items:
        raise ValueError("items must be non-empty")
    capacity = _decoder_capacity(model)
    usable_ranges = []
    for range_index, (lo, hi) in enumerate(config.length_ranges):
        max_len = hi - 1 if capacity is None else min(hi - 1, capacity)
        if lo <= max_len:
            usable_ranges.append((range_index, lo, max_len))
    if not usable_ranges:
        raise ValueError(
            f"no length range fits the decoder capacity {capacity}: {config.length_ranges}"
        )
    ids: dict[str, TextualId] = {}
    rows: list[AllocationRow] = []
    taken: set[str] = set()
    state_cache: dict[str, object] = {}
    logprob_caches: dict[str, dict] = {}
    dbs_cache: dict[tuple[str, float, int], list[TextualId]] = {}

    for position, (key, text) in enumerate(items):
        if key in ids:
            raise ValueError(f"duplicate item key {key!r} in allocation input")
        if text not in state_cache:
            state_cache[text] = model.encode(vocab.encode(text, model.config.max_src_len))
            logprob_caches[text] = {}
        accepted: TextualId | None = None
        accepted_lam, accepted_range = config.lam_init, 0
        last_candidates: list[TextualId] = []
        for range_index, lo, max_len in usable_ranges:
            lam = config.lam_init
            while True:
                cache_key = (text, lam, range_index)
                candidates = dbs_cache.get(cache_key)
                if candidates is None:
                    candidates = diverse_beam_search(
                        model, None, vocab,
                        groups=config.groups, beams_per_group=config.beams_per_group,
                        lam=lam, max_len=max_len, min_len=lo,
                        state=state_cache[text], logprob_cache=logprob_caches[text],
                    )
                    dbs_cache[cache_key] = candidates
                last_candidates = candidates
                for cand in candidates:
                    if cand.text not in taken:
                        accepted, accepted_lam, accepted_range = cand, lam, range_index
                        break
                if accepted is not None:
                    break
                lam += config.lam_step
                if lam > config.lam_max + 1e-12:
                    break
            if accepted is not None:
                break
        if accepted is None:
            base = last_candidates[0].tokens if last_candidates else ()
            attempt = 0
            while True:
                suffix = _ordinal_tokens(position + attempt * len(items), vocab.size)
                if capacity is not None and len(suffix) > capacity:
                    raise IdSpaceExhausted(f"cannot disambiguate item {key!r} within "
                                           f"decoder capacity {capacity}")
                keep = base if capacity is None else base[: capacity - len(suffix)]
                tokens = keep + suffix
                if vocab.decode(tokens) not in taken:
                    break
                attempt += 1
            accepted = TextualId(tokens=tokens, text=vocab.decode(tokens))
            accepted_lam, accepted_range = config.lam_max, -1
            log.warning("item %r exhausted all penalties and lengths; ordinal fallback ID %r",
                        key, accepted.text)
        ids[key] = accepted
        taken.add(accepted.text)
        rows.append(AllocationRow(key=key, lam=accepted_lam, range_index=accepted_range))

    registry = IdRegistry(ids=ids, rows=tuple(rows),
                          generator_hash=getattr(model, "param_hash", lambda: None)())
    stats = registry.stats(lam_init=config.lam_init)
    if stats["fallback_count"]:
        log.warning("allocation used the ordinal fallback for %d items", int(stats["fallback_count"]))
    log.info("allocated %d ids: %.2f%% needed lambda escalation, %.2f%% needed length extension",
             len(ids), 100 * stats["fraction_lambda_escalated"], 100 * stats["fraction_length_extended"])
    return registry


def generate_user_id(model, history_texts: list[str], vocab: Vocabulary,
                     config: AllocatorConfig) -> TextualId:
    """Generate a profile ID from the concatenated history texts.

    User IDs are not registered for uniqueness; two users may share one.
    """
    if not history_texts:
        raise ValueError("history_texts must be non-empty")
    profile = "; ".join(history_texts)
    src = vocab.encode(profile, model.config.max_src_len)
    lo, hi = config.length_ranges[0]
    capacity = _decoder_capacity(model)
    max_len = hi - 1 if capacity is None else min(hi - 1, capacity)
    if lo > max_len:
        raise ValueError(f"length range {(lo, hi)} does not fit the decoder capacity {capacity}")
    return diverse_beam_search(
        model, src, vocab,
        groups=1, beams_per_group=config.beams_per_group,
        lam=config.lam_init, max_len=max_len, min_len=lo,
    )[0]
