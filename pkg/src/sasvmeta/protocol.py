"""Genre groups, cross-genre protocols, trial lists and meta-task sampling."""

from __future__ import annotations

import math
import os
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .datagen import DEFAULT_GENRES, Utterance, spoof_id

TRIAL_KINDS = ("target", "nontarget", "spoof")
DEFAULT_MIX = (0.4, 0.4, 0.2)

_ROMAN = ("I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X")


@dataclass(frozen=True)
class GenreGrouping:
    groups: tuple[tuple[str, frozenset], ...]

    def __post_init__(self):
        seen: set[str] = set()
        names = [name for name, _ in self.groups]
        if len(set(names)) != len(names):
            raise ValueError("group names must be unique")
        for name, genres in self.groups:
            if seen & genres:
                raise ValueError(f"group {name} overlaps another group: {sorted(seen & genres)}")
            seen |= genres

    @classmethod
    def from_lists(cls, groups: Mapping[str, Iterable[str]]) -> "GenreGrouping":
        return cls(tuple((name, frozenset(g)) for name, g in groups.items()))

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.groups]

    @property
    def genres(self) -> frozenset:
        return frozenset().union(*(g for _, g in self.groups))

    def genres_of(self, names: Iterable[str]) -> frozenset:
        table = dict(self.groups)
        return frozenset().union(*(table[n] for n in names))

    def group_of(self, genre: str) -> str:
        for name, genres in self.groups:
            if genre in genres:
                return name
        raise KeyError(genre)


DEFAULT_GROUPING = GenreGrouping.from_lists(
    {
        "I": ("dr", "vl", "sp"),
        "II": ("en", "in", "pl"),
        "III": ("lb", "mo"),
        "IV": ("si", "re"),
    }
)
assert DEFAULT_GROUPING.genres == frozenset(DEFAULT_GENRES)


@dataclass(frozen=True)
class CgpProtocol:
    name: str
    seen_groups: tuple[str, ...]
    unseen_groups: tuple[str, ...]
    grouping: GenreGrouping = DEFAULT_GROUPING

    @property
    def seen_genres(self) -> frozenset:
        return self.grouping.genres_of(self.seen_groups)

    @property
    def unseen_genres(self) -> frozenset:
        return self.grouping.genres_of(self.unseen_groups)


def _cgp_index(name) -> int:
    if isinstance(name, int):
        return name
    token = str(name).strip().upper()
    if token.startswith("CGP"):
        token = token[3:].strip()
    if token.isdigit():
        return int(token)
    if token in _ROMAN:
        return _ROMAN.index(token) + 1
    raise ValueError(f"unknown protocol name {name!r}")


def build_cgp(grouping: GenreGrouping = DEFAULT_GROUPING, name="CGP I") -> CgpProtocol:
    """Return cross-genre protocol ``name``; protocol k holds out group K+1-k.

    With the default four groups: CGP I holds out IV, CGP II holds out III,
    CGP III holds out II and CGP IV holds out I.
    """
    k = _cgp_index(name)
    names = grouping.names
    if not 1 <= k <= len(names):
        raise ValueError(f"unknown protocol name {name!r}")
    unseen = names[len(names) - k]
    seen = tuple(n for n in names if n != unseen)
    return CgpProtocol(f"CGP {_ROMAN[k - 1]}", seen, (unseen,), grouping)


def all_seen(grouping: GenreGrouping = DEFAULT_GROUPING) -> CgpProtocol:
    """Protocol with every group seen (no held-out genres)."""
    return CgpProtocol("ALL", tuple(grouping.names), (), grouping)


def filter_training(manifest: Sequence[Utterance], cgp: CgpProtocol) -> list[Utterance]:
    covered = cgp.grouping.genres
    missing = sorted({u.genre for u in manifest} - covered)
    if missing:
        raise ValueError(f"genres not covered by the grouping: {missing}")
    seen = cgp.seen_genres
    kept = [u for u in manifest if u.genre in seen]
    if not kept:
        raise ValueError(f"{cgp.name}: no training utterances left after filtering")
    return kept


def label_trial(test_is_genuine: bool, speaker_match: bool) -> bool:
    """A trial is true only for genuine speech from the enrolled speaker."""
    return bool(test_is_genuine) and bool(speaker_match)


@dataclass(frozen=True)
class TrialPair:
    trial_id: str
    enroll_utts: tuple[str, ...]
    test_utt: str
    label: bool
    enroll_genre: str
    test_genre: str
    trial_kind: str

    def __post_init__(self):
        if not self.enroll_utts:
            raise ValueError(f"{self.trial_id}: empty enrollment")
        if self.trial_kind not in TRIAL_KINDS:
            raise ValueError(f"{self.trial_id}: unknown trial kind {self.trial_kind!r}")
        if self.label != (self.trial_kind == "target"):
            raise ValueError(f"{self.trial_id}: label inconsistent with kind {self.trial_kind}")


@dataclass
class MetaTask:
    meta_train: list[TrialPair]
    meta_test: list[TrialPair]
    train_genres: frozenset
    test_genres: frozenset


def _kind(test: Utterance, enroll_speaker: str) -> str:
    if test.is_spoof:
        return "spoof"
    return "target" if test.speaker == enroll_speaker else "nontarget"


def make_trial(trial_id: str, enroll: Sequence[Utterance], test: Utterance) -> TrialPair:
    speaker = enroll[0].speaker
    if any(e.speaker != speaker or e.is_spoof for e in enroll):
        raise ValueError(f"{trial_id}: enrollment must be bona fide utterances of one speaker")
    return TrialPair(
        trial_id=trial_id,
        enroll_utts=tuple(e.utt_id for e in enroll),
        test_utt=test.utt_id,
        label=label_trial(not test.is_spoof, test.speaker == speaker),
        enroll_genre=enroll[0].genre,
        test_genre=test.genre,
        trial_kind=_kind(test, speaker),
    )


def split_manifest(manifest: Sequence[Utterance], eval_per_cell: int, seed: int):
    """Split into (train, eval) manifests, holding out ``eval_per_cell``
    bona fide utterances per (speaker, genre) cell together with their
    spoofed counterparts.  Speakers overlap between the two halves."""
    rng = np.random.default_rng([seed, 11])
    cells = defaultdict(list)
    for u in manifest:
        if not u.is_spoof:
            cells[(u.speaker, u.genre)].append(u.utt_id)
    held = set()
    for key in sorted(cells):
        ids = sorted(cells[key])
        if len(ids) <= eval_per_cell:
            raise ValueError(f"cell {key} has {len(ids)} utterances, cannot hold out {eval_per_cell}")
        for i in rng.choice(len(ids), eval_per_cell, replace=False):
            held.add(ids[i])
            held.add(spoof_id(ids[i]))
    train = [u for u in manifest if u.utt_id not in held]
    test = [u for u in manifest if u.utt_id in held]
    return train, test


def _allocate(n: int, mix: Sequence[float]) -> list[int]:
    """Integer counts for ``mix`` summing to ``n``; each count is at least
    floor(share * n) and shares are rounded up before trimming the largest."""
    mix = np.asarray(mix, dtype=float)
    mix = mix / mix.sum()
    counts = [math.ceil(round(m * n, 9)) for m in mix]
    while sum(counts) > n:
        counts[int(np.argmax(counts))] -= 1
    return counts


class _Pool:
    def __init__(self, utterances: Iterable[Utterance]):
        self.bona = defaultdict(list)
        self.spoofs = []
        for u in utterances:
            if u.is_spoof:
                self.spoofs.append(u)
            else:
                self.bona[u.speaker].append(u)
        self.speakers = sorted(self.bona)


def sample_pairwise_trials(
    utterances: Sequence[Utterance],
    seed,
    num_trials: int | None = None,
    mix: Sequence[float] = DEFAULT_MIX,
    enroll_size: int = 1,
    prefix: str = "t",
) -> list[TrialPair]:
    """Turn a pool of utterances into labelled (enrollment, test) trials.

    ``mix`` gives the target/nontarget/spoof shares; the spoof share is folded
    into the other two when the pool holds no spoofed utterances.  Target
    trials take the enrollment from a different genre than the test side
    whenever the speaker has one, which simulates channel mismatch.  Spoof
    trials enroll the source speaker of the spoofed test utterance when
    possible, i.e. they are impersonation attempts.
    """
    pool = _Pool(utterances)
    if len(pool.speakers) < 2:
        raise ValueError("need bona fide utterances from at least 2 speakers")
    can_enroll = [s for s in pool.speakers if len(pool.bona[s]) >= enroll_size]
    can_target = [s for s in pool.speakers if len(pool.bona[s]) >= enroll_size + 1]
    if not can_target:
        raise ValueError("cannot form any target trial: every speaker has too few utterances")
    num_trials = len(utterances) if num_trials is None else num_trials
    mix = list(mix)
    if not pool.spoofs:
        mix[2] = 0.0
    n_target, n_nontarget, n_spoof = _allocate(num_trials, mix)

    rng = np.random.default_rng(seed)
    all_bona = [u for s in pool.speakers for u in pool.bona[s]]
    pairs = []

    def enroll_from(speaker, exclude=None, avoid_genre=None):
        options = [u for u in pool.bona[speaker] if u is not exclude]
        if avoid_genre is not None:
            mismatched = [u for u in options if u.genre != avoid_genre]
            if len(mismatched) >= enroll_size:
                options = mismatched
        idx = rng.choice(len(options), enroll_size, replace=False)
        return [options[i] for i in sorted(idx)]

    for _ in range(n_target):
        speaker = can_target[rng.integers(len(can_target))]
        test = pool.bona[speaker][rng.integers(len(pool.bona[speaker]))]
        pairs.append((enroll_from(speaker, exclude=test, avoid_genre=test.genre), test))
    for _ in range(n_nontarget):
        test = all_bona[rng.integers(len(all_bona))]
        others = [s for s in can_enroll if s != test.speaker]
        if not others:
            raise ValueError("cannot form a nontarget trial: no second enrollable speaker")
        pairs.append((enroll_from(others[rng.integers(len(others))]), test))
    for _ in range(n_spoof):
        test = pool.spoofs[rng.integers(len(pool.spoofs))]
        speaker = test.speaker
        if speaker not in can_enroll:
            speaker = can_enroll[rng.integers(len(can_enroll))]
        pairs.append((enroll_from(speaker), test))

    order = rng.permutation(len(pairs))
    return [make_trial(f"{prefix}{i:05d}", *pairs[j]) for i, j in enumerate(order)]


class MetaTaskSampler:
    """Draws genre-disjoint (meta-train, meta-test) tasks from one manifest.

    Each task holds out one randomly chosen genre for the meta-test side and
    draws ``g_mtr`` of the remaining genres for the meta-train side; any other
    genres sit the task out.  Utterances are drawn speaker by speaker (two
    bona fide items plus one spoofed item when available) so every side can
    form target trials.
    """

    min_side = 4

    def __init__(
        self,
        manifest: Sequence[Utterance],
        batch_size: int = 64,
        g_mtr: int | None = None,
        mix: Sequence[float] = DEFAULT_MIX,
        trials_per_utterance: float = 1.0,
    ):
        if batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        self.genres = sorted({u.genre for u in manifest})
        if g_mtr is None:
            g_mtr = max(1, len(self.genres) - 2)
        if g_mtr < 1 or len(self.genres) < g_mtr + 1:
            raise ValueError(f"need at least g_mtr + 1 = {g_mtr + 1} genres, found {len(self.genres)}")
        self.batch_size = batch_size
        self.g_mtr = g_mtr
        self.mix = tuple(mix)
        self.trials_per_utterance = trials_per_utterance
        self._bona = defaultdict(list)
        self._spoof = defaultdict(list)
        for u in manifest:
            (self._spoof if u.is_spoof else self._bona)[(u.genre, u.speaker)].append(u)
        self._speakers = {
            g: sorted({s for (genre, s) in self._bona if genre == g}) for g in self.genres
        }

    def split_genres(self, rng) -> tuple[frozenset, frozenset]:
        test = self.genres[rng.integers(len(self.genres))]
        rest = [g for g in self.genres if g != test]
        train = [rest[i] for i in sorted(rng.choice(len(rest), self.g_mtr, replace=False))]
        return frozenset(train), frozenset([test])

    def _draw(self, genres: frozenset, n: int, rng) -> list[Utterance]:
        speakers = sorted(set().union(*(self._speakers[g] for g in genres)))
        drawn: list[Utterance] = []
        for i in rng.permutation(len(speakers)):
            if len(drawn) >= n:
                break
            s = speakers[i]
            bona = [u for g in sorted(genres) for u in self._bona.get((g, s), ())]
            spoof = [u for g in sorted(genres) for u in self._spoof.get((g, s), ())]
            take = [bona[j] for j in rng.choice(len(bona), min(2, len(bona)), replace=False)]
            if spoof:
                take.append(spoof[rng.integers(len(spoof))])
            drawn.extend(take[: n - len(drawn)])
        return drawn

    def sample(self, seed) -> MetaTask:
        rng = np.random.default_rng(seed)
        train_genres, test_genres = self.split_genres(rng)
        n_test = max(self.min_side, self.batch_size // (self.g_mtr + 1))
        n_train = max(self.min_side, self.batch_size - n_test)
        sides = []
        for tag, genres, n in (("mtr", train_genres, n_train), ("mte", test_genres, n_test)):
            pool = self._draw(genres, n, rng)
            try:
                trials = sample_pairwise_trials(
                    pool,
                    seed=rng.integers(2**63),
                    num_trials=max(1, round(self.trials_per_utterance * len(pool))),
                    mix=self.mix,
                    prefix=f"{tag}-",
                )
            except ValueError as err:
                raise ValueError(f"genres {sorted(genres)}: {err}") from err
            sides.append(trials)
        return MetaTask(sides[0], sides[1], train_genres, test_genres)


def sample_meta_task(train_manifest, batch_size: int, g_mtr: int | None = None, seed=0, **kwargs) -> MetaTask:
    return MetaTaskSampler(train_manifest, batch_size, g_mtr, **kwargs).sample(seed)


def build_complex_eval(
    eval_manifest: Sequence[Utterance],
    substitution_rate: float,
    seed: int,
    num_trials: int = 4000,
    target_fraction: float = 0.8,
    enroll_size: int = 3,
) -> list[TrialPair]:
    """Build a mixed evaluation list with spoof substitution.

    A plain target/nontarget list is drawn first: every speaker is enrolled
    with ``enroll_size`` bona fide utterances of one genre (genres assigned
    round-robin over speakers), and the remaining bona fide utterances form
    the test pool.  Each trial's test utterance is then independently swapped
    for its spoofed counterpart with probability ``substitution_rate`` and the
    label recomputed.  The plain list and the substitution draws use separate
    random streams, so ``substitution_rate=0`` gives the plain list.
    """
    if not 0.0 <= substitution_rate <= 1.0:
        raise ValueError("substitution_rate must lie in [0, 1]")
    index = {u.utt_id: u for u in eval_manifest}
    bona = defaultdict(lambda: defaultdict(list))
    for u in eval_manifest:
        if not u.is_spoof:
            bona[u.speaker][u.genre].append(u)
    speakers = sorted(bona)
    if len(speakers) < 2:
        raise ValueError("evaluation needs at least 2 speakers")
    genres = sorted({g for s in speakers for g in bona[s]})

    rng = np.random.default_rng([seed, 21])
    enrollment = {}
    used = set()
    for i, s in enumerate(speakers):
        for k in range(len(genres)):
            cell = sorted(bona[s].get(genres[(i + k) % len(genres)], ()), key=lambda u: u.utt_id)
            if len(cell) >= enroll_size:
                chosen = [cell[j] for j in sorted(rng.choice(len(cell), enroll_size, replace=False))]
                enrollment[s] = chosen
                used.update(u.utt_id for u in chosen)
                break
    test_pool = sorted(
        (u for s in speakers for g in bona[s] for u in bona[s][g] if u.utt_id not in used),
        key=lambda u: u.utt_id,
    )
    test_pool = [u for u in test_pool if u.speaker in enrollment]
    enrolled = sorted(enrollment)
    if len(enrolled) < 2 or not test_pool:
        raise ValueError(
            f"not enough bona fide evaluation data: need 2 speakers with a genre cell of at least "
            f"{enroll_size} utterances for enrollment and leftover utterances to test"
        )

    pairs = []
    for _ in range(num_trials):
        test = test_pool[rng.integers(len(test_pool))]
        if rng.random() < target_fraction:
            speaker = test.speaker
        else:
            others = [s for s in enrolled if s != test.speaker]
            speaker = others[rng.integers(len(others))]
        pairs.append((enrollment[speaker], test))

    sub_rng = np.random.default_rng([seed, 22])
    trials = []
    for i, (enroll, test) in enumerate(pairs):
        if sub_rng.random() < substitution_rate:
            try:
                test = index[spoof_id(test.utt_id)]
            except KeyError:
                raise ValueError(f"no spoofed counterpart for {test.utt_id}") from None
        trials.append(make_trial(f"T{i:06d}", enroll, test))
    return trials


# -- files -------------------------------------------------------------------


def write_trials(trials: Iterable[TrialPair], path: os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in trials:
            f.write(
                f"{t.trial_id}\t{','.join(t.enroll_utts)}\t{t.test_utt}\t{int(t.label)}\t{t.trial_kind}\n"
            )


def read_trials(path: os.PathLike, manifest: Mapping[str, Utterance] | None = None) -> list[TrialPair]:
    """Read a trial list; genres are recovered from ``manifest`` when given."""
    trials = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5 or parts[3] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: malformed trial line")
            trial_id, enroll, test, label, kind = parts
            enroll_utts = tuple(enroll.split(","))
            enroll_genre = test_genre = ""
            if manifest is not None:
                enroll_genre = manifest[enroll_utts[0]].genre
                test_genre = manifest[test].genre
            trials.append(
                TrialPair(trial_id, enroll_utts, test, label == "1", enroll_genre, test_genre, kind)
            )
    return trials


def write_protocol(cgp: CgpProtocol, path: os.PathLike) -> None:
    lines = [
        f"name: {cgp.name}",
        f"seen: {' '.join(cgp.seen_groups)}",
        f"unseen: {' '.join(cgp.unseen_groups)}",
    ]
    for name, genres in cgp.grouping.groups:
        ordered = [g for g in DEFAULT_GENRES if g in genres] + sorted(genres - set(DEFAULT_GENRES))
        lines.append(f"group {name}: {' '.join(ordered)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_protocol(path: os.PathLike) -> CgpProtocol:
    fields: dict[str, str] = {}
    groups: dict[str, list[str]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(":")
        key = key.strip()
        if key.startswith("group "):
            groups[key[6:].strip()] = value.split()
        else:
            fields[key] = value.strip()
    try:
        grouping = GenreGrouping.from_lists(groups)
        return CgpProtocol(
            fields["name"], tuple(fields["seen"].split()), tuple(fields["unseen"].split()), grouping
        )
    except KeyError as err:
        raise ValueError(f"{path}: missing field {err}") from None
