"""Scoring and EER-family evaluation."""

from __future__ import annotations

import csv
import io
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .datagen import Utterance
from .model import UtteranceOutputs
from .protocol import TrialPair

ABSENT = "-"


@dataclass(frozen=True)
class ScoreRecord:
    trial_id: str
    asv_score: float
    sasv_score: float
    label: bool
    trial_kind: str
    enroll_genre: str
    test_genre: str

    def __post_init__(self):
        if self.label != (self.trial_kind == "target"):
            raise ValueError(f"{self.trial_id}: label inconsistent with kind {self.trial_kind}")


@dataclass(frozen=True)
class EerResult:
    eer: float
    threshold: float
    num_positive: int
    num_negative: int

    @property
    def percent(self) -> float:
        return 100.0 * self.eer


def _split(scores, labels=None):
    if labels is None:
        pairs = list(scores)
        scores = np.array([s for s, _ in pairs], dtype=float)
        labels = np.array([bool(l) for _, l in pairs])
    else:
        scores = np.asarray(scores, dtype=float)
        labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    pos, neg = np.sort(scores[labels]), np.sort(scores[~labels])
    if pos.size == 0 or neg.size == 0:
        raise ValueError("EER needs at least one positive and one negative score")
    return pos, neg


def det_curve(scores, labels=None):
    """Operating points ``(far, frr, thresholds)`` over all distinct scores.

    A trial is accepted when its score is strictly greater than the
    threshold.  The first point uses threshold -inf (accept everything).
    """
    return _rates(*_split(scores, labels))


def _rates(pos, neg):
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([pos, neg]))])
    frr = np.searchsorted(pos, thresholds, side="right") / pos.size
    far = 1.0 - np.searchsorted(neg, thresholds, side="right") / neg.size
    return far, frr, thresholds


def compute_eer(scores, labels=None) -> EerResult:
    """Equal error rate from ``(score, is_positive)`` pairs or two arrays.

    FRR rises and FAR falls along the threshold sweep; the EER is read at the
    first operating point where FRR >= FAR, interpolating linearly from the
    previous point when the two rates cross between them.
    """
    pos, neg = _split(scores, labels)
    far, frr, thr = _rates(pos, neg)
    j = int(np.argmax(frr >= far))
    if frr[j] == far[j]:
        return EerResult(float(frr[j]), float(thr[j]), pos.size, neg.size)
    d_frr, d_far = frr[j] - frr[j - 1], far[j] - far[j - 1]
    t = (far[j - 1] - frr[j - 1]) / (d_frr - d_far)
    eer = frr[j - 1] + t * d_frr
    threshold = thr[j] if j == 1 else thr[j - 1] + t * (thr[j] - thr[j - 1])
    return EerResult(float(eer), float(threshold), pos.size, neg.size)


def sv_eer(records: Sequence[ScoreRecord]) -> EerResult:
    """Speaker-verification EER: targets vs bona fide nontargets on ASV scores."""
    kept = [r for r in records if r.trial_kind != "spoof"]
    return compute_eer([r.asv_score for r in kept], [r.trial_kind == "target" for r in kept])


def sasv_eer(records: Sequence[ScoreRecord]) -> EerResult:
    """Spoofing-aware EER: true trials vs nontarget and spoof trials on SASV scores."""
    return compute_eer([r.sasv_score for r in records], [r.label for r in records])


METRICS: dict[str, Callable[[Sequence[ScoreRecord]], EerResult]] = {"sv": sv_eer, "sasv": sasv_eer}


def _metric(metric):
    return METRICS[metric] if isinstance(metric, str) else metric


def maybe_eer(records, metric) -> EerResult | None:
    """``metric(records)``, or None when a class is missing."""
    try:
        return _metric(metric)(records)
    except ValueError:
        return None


def genre_matrix(records: Sequence[ScoreRecord], metric="sv") -> dict[tuple[str, str], EerResult | None]:
    """EER per (enroll genre, test genre) cell; cells lacking a class are None."""
    cells = defaultdict(list)
    for r in records:
        cells[(r.enroll_genre, r.test_genre)].append(r)
    return {key: maybe_eer(cells[key], metric) for key in sorted(cells)}


def genre_breakdown(records: Sequence[ScoreRecord], metric="sv", by: str = "test") -> dict[str, EerResult | None]:
    """EER per test (or enrollment) genre."""
    attr = "test_genre" if by == "test" else "enroll_genre"
    groups = defaultdict(list)
    for r in records:
        groups[getattr(r, attr)].append(r)
    return {g: maybe_eer(groups[g], metric) for g in sorted(groups)}


def subset_eer(records: Sequence[ScoreRecord], test_genres: Iterable[str], metric="sv") -> EerResult | None:
    wanted = set(test_genres)
    return maybe_eer([r for r in records if r.test_genre in wanted], metric)


def diff_report(system: Sequence[ScoreRecord], baseline: Sequence[ScoreRecord], metric="sv") -> dict:
    """Baseline EER minus system EER per genre cell (positive favours the system)."""
    sys_m, base_m = genre_matrix(system, metric), genre_matrix(baseline, metric)
    sys_cells = {k for k, v in sys_m.items() if v is not None}
    base_cells = {k for k, v in base_m.items() if v is not None}
    if sys_cells != base_cells:
        missing = sorted(sys_cells ^ base_cells)
        raise ValueError(f"system and baseline cover different cells: {missing}")
    return {k: base_m[k].eer - sys_m[k].eer for k in sorted(sys_cells)}


# -- scoring a model -----------------------------------------------------------


@torch.no_grad()
def score_trials(
    model,
    trials: Sequence[TrialPair],
    utterances: Mapping[str, Utterance],
    chunk: int = 512,
) -> list[ScoreRecord]:
    """Embed every utterance referenced by ``trials`` once and score the trials.

    ASV scores are cosine similarities of speaker embeddings.  The SASV score
    comes from the back-end; a speaker-only model reports ``(1 + cos) / 2``.
    """
    model.eval()
    ids = sorted({u for t in trials for u in (*t.enroll_utts, t.test_utt)})
    row = {uid: i for i, uid in enumerate(ids)}
    dtype = next(model.parameters()).dtype
    e_asv, e_fuse = [], []
    for start in range(0, len(ids), chunk):
        feats = np.stack([utterances[u].features for u in ids[start : start + chunk]])
        out = model(torch.from_numpy(feats).to(dtype))
        e_asv.append(out.e_asv)
        if out.e_fuse is not None:
            e_fuse.append(out.e_fuse)
    outputs = UtteranceOutputs(
        asv_logits=torch.empty(0),
        e_asv=torch.cat(e_asv),
        spoof_prob=None,
        e_fuse=torch.cat(e_fuse) if e_fuse else None,
    )
    by_size = defaultdict(list)
    for i, t in enumerate(trials):
        by_size[len(t.enroll_utts)].append(i)
    asv = np.empty(len(trials))
    sasv = np.empty(len(trials))
    for idx in by_size.values():
        enroll = torch.tensor([[row[u] for u in trials[i].enroll_utts] for i in idx])
        test = torch.tensor([row[trials[i].test_utt] for i in idx])
        s, a = model.score(outputs, enroll, test)
        asv[idx] = a.double().numpy()
        sasv[idx] = ((1.0 + a) / 2.0 if s is None else s).double().numpy()
    model.train()
    return [
        ScoreRecord(
            t.trial_id,
            float(asv[i]),
            float(sasv[i]),
            t.label,
            t.trial_kind,
            t.enroll_genre or utterances[t.enroll_utts[0]].genre,
            t.test_genre or utterances[t.test_utt].genre,
        )
        for i, t in enumerate(trials)
    ]


# -- files -----------------------------------------------------------------------


def write_scores(records: Iterable[ScoreRecord], path: os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(
                f"{r.trial_id}\t{r.asv_score:.9g}\t{r.sasv_score:.9g}\t{int(r.label)}\t"
                f"{r.trial_kind}\t{r.enroll_genre}\t{r.test_genre}\n"
            )


def read_scores(path: os.PathLike) -> list[ScoreRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 7 or parts[3] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: malformed score line")
            tid, asv, sasv, label, kind, eg, tg = parts
            records.append(ScoreRecord(tid, float(asv), float(sasv), label == "1", kind, eg, tg))
    return records


def _pct(result: EerResult | float | None) -> str:
    if result is None:
        return ABSENT
    value = result.eer if isinstance(result, EerResult) else result
    return f"{100.0 * value:.2f}"


def _signed_pct(value: float | None) -> str:
    return ABSENT if value is None else f"{100.0 * value:+.2f}"


def summary_rows(systems: Mapping[str, Sequence[ScoreRecord]]) -> list[tuple[str, str, str]]:
    return [(name, _pct(maybe_eer(recs, "sv")), _pct(maybe_eer(recs, "sasv"))) for name, recs in systems.items()]


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(str(c).rjust(w) for c, w in zip(cells, widths))
    return "\n".join([line(header), "  ".join("-" * w for w in widths), *map(line, rows)])


def format_matrix(matrix: Mapping[tuple[str, str], object], signed: bool = False) -> str:
    """Rows are enrollment genres, columns test genres; missing cells show '-'."""
    rows = sorted({e for e, _ in matrix})
    cols = sorted({t for _, t in matrix})
    fmt = _signed_pct if signed else _pct
    body = [[r] + [fmt(matrix.get((r, c))) for c in cols] for r in rows]
    return format_table(["enroll\\test", *cols], body)


def report(
    systems: Mapping[str, Sequence[ScoreRecord]],
    baseline: str | None = None,
    genre_order: Sequence[str] | None = None,
) -> tuple[str, str]:
    """Text report and machine-readable CSV for one or more score sets.

    The text holds an SV/SASV summary, a per-test-genre SV-EER table and, when
    ``baseline`` names one of the systems, the signed difference matrix of
    every other system against it.
    """
    sections = [format_table(["system", "SV-EER", "SASV-EER"], summary_rows(systems))]
    csv_buf = io.StringIO()
    writer = csv.writer(csv_buf, lineterminator="\n")
    writer.writerow(["system", "table", "enroll_genre", "test_genre", "metric", "value"])
    for name, (_, sv, sasv) in zip(systems, summary_rows(systems)):
        writer.writerow([name, "summary", "", "", "sv_eer", sv])
        writer.writerow([name, "summary", "", "", "sasv_eer", sasv])

    breakdowns = {name: genre_breakdown(recs, "sv") for name, recs in systems.items()}
    genres = list(genre_order) if genre_order else sorted({g for b in breakdowns.values() for g in b})
    genres = [g for g in genres if any(g in b for b in breakdowns.values())]
    rows = []
    for name, recs in systems.items():
        rows.append([name, _pct(maybe_eer(recs, "sv"))] + [_pct(breakdowns[name].get(g)) for g in genres])
        for g in genres:
            writer.writerow([name, "per_genre", "", g, "sv_eer", _pct(breakdowns[name].get(g))])
    sections.append(format_table(["system", "overall", *genres], rows))

    for name, recs in systems.items():
        matrix = genre_matrix(recs, "sv")
        sections.append(f"SV-EER (%) by enrollment x test genre: {name}\n" + format_matrix(matrix))
        for (eg, tg), res in matrix.items():
            writer.writerow([name, "genre_matrix", eg, tg, "sv_eer", _pct(res)])
    if baseline is not None:
        for name, recs in systems.items():
            if name == baseline:
                continue
            diff = diff_report(recs, systems[baseline], "sv")
            sections.append(f"EER difference (baseline - {name}, %)\n" + format_matrix(diff, signed=True))
            for (eg, tg), value in diff.items():
                writer.writerow([name, "diff_vs_" + baseline, eg, tg, "sv_eer_diff", _signed_pct(value)])
    return "\n\n".join(sections) + "\n", csv_buf.getvalue()
