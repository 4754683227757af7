"""Seeded synthetic corpus standing in for a multi-genre speaker corpus.

Each bona fide utterance is a ``frames x feature_dim`` matrix built from three
additive factors::

    x[t] = speaker_vector + genre_vector + session_offset + frame_noise[t]

Speaker and genre vectors are pure functions of ``(seed, id)``; session offset
and frame noise are pure functions of ``(seed, speaker, genre, index)``.  A
spoofed copy is produced by :func:`spoofify`, which applies a fixed linear
distortion plus an additive artifact vector (the simulated re-vocoding
channel).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_GENRES = ("dr", "vl", "sp", "en", "in", "pl", "lb", "mo", "si", "re")

SPOOF_SUFFIX = "-spoof"

# stream tags for np.random.default_rng([seed, tag, ...])
_SPEAKER, _GENRE, _UTTERANCE, _SPOOF = 1, 2, 3, 4


class CorpusSpecError(ValueError):
    """Raised when a :class:`CorpusSpec` violates one of its invariants."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class CorpusSpec:
    num_speakers: int = 20
    genres: tuple[str, ...] = DEFAULT_GENRES
    utterances_per_speaker_genre: int = 5
    frames: int = 16
    feature_dim: int = 24
    speaker_scale: float = 1.0
    genre_scale: float = 0.6
    noise_scale: float = 0.5
    spoof_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "genres", tuple(self.genres))

    def validate(self) -> "CorpusSpec":
        if self.num_speakers < 2:
            raise CorpusSpecError("num_speakers", "need at least 2 speakers")
        if not self.genres:
            raise CorpusSpecError("genres", "at least one genre is required")
        if len(set(self.genres)) != len(self.genres):
            raise CorpusSpecError("genres", "genre tags must be unique")
        if self.utterances_per_speaker_genre < 1:
            raise CorpusSpecError("utterances_per_speaker_genre", "must be positive")
        if self.frames < 1:
            raise CorpusSpecError("frames", "must be positive")
        if self.feature_dim < 2:
            raise CorpusSpecError("feature_dim", "must be at least 2")
        for name in ("speaker_scale", "genre_scale", "noise_scale", "spoof_scale"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise CorpusSpecError(name, "must be a nonnegative finite number")
        return self

    def speaker_ids(self) -> list[str]:
        return [speaker_name(i) for i in range(self.num_speakers)]


@dataclass
class Utterance:
    utt_id: str
    speaker: str
    genre: str
    is_spoof: bool
    features: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.features.shape


def speaker_name(index: int) -> str:
    return f"spk{index:03d}"


def speaker_vector(seed: int, index: int, dim: int, scale: float) -> np.ndarray:
    rng = np.random.default_rng([seed, _SPEAKER, index])
    return scale * rng.standard_normal(dim)


def genre_vector(seed: int, index: int, dim: int, scale: float) -> np.ndarray:
    rng = np.random.default_rng([seed, _GENRE, index])
    return scale * rng.standard_normal(dim)


def synth_corpus(spec: CorpusSpec) -> list[Utterance]:
    """Generate the bona fide manifest described by ``spec``.

    Every (speaker, genre) cell receives exactly
    ``spec.utterances_per_speaker_genre`` utterances.  The output is ordered
    by speaker, then genre (in ``spec.genres`` order), then index.
    """
    spec.validate()
    dim, frames = spec.feature_dim, spec.frames
    genre_vecs = [genre_vector(spec.seed, g, dim, spec.genre_scale) for g in range(len(spec.genres))]
    manifest = []
    for s in range(spec.num_speakers):
        spk_vec = speaker_vector(spec.seed, s, dim, spec.speaker_scale)
        for g, genre in enumerate(spec.genres):
            for j in range(spec.utterances_per_speaker_genre):
                rng = np.random.default_rng([spec.seed, _UTTERANCE, s, g, j])
                session = rng.standard_normal(dim)
                noise = rng.standard_normal((frames, dim))
                x = spk_vec + genre_vecs[g] + spec.noise_scale * (session + noise)
                manifest.append(
                    Utterance(
                        utt_id=f"{speaker_name(s)}-{genre}-{j:03d}",
                        speaker=speaker_name(s),
                        genre=genre,
                        is_spoof=False,
                        features=x.astype(np.float32),
                    )
                )
    return manifest


def spoof_channel(dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Return the fixed ``(distortion, artifact)`` pair of the spoof channel.

    The distortion is a scaled random orthogonal matrix, so adding it to the
    identity keeps every input direction within a bounded angle.
    """
    rng = np.random.default_rng([seed, _SPOOF, dim])
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    distortion = 0.15 * q
    artifact = rng.standard_normal(dim)
    return distortion, artifact


def spoofify(u: Utterance, spoof_scale: float, seed: int) -> Utterance:
    """Pass ``u`` through the simulated re-vocoding channel.

    ``x' = x + spoof_scale * (x @ D.T + a)`` with ``(D, a)`` from
    :func:`spoof_channel`.  The speaker label is kept.
    """
    if u.is_spoof:
        raise ValueError(f"{u.utt_id} is already spoofed")
    if spoof_scale < 0:
        raise ValueError("spoof_scale must be nonnegative")
    x = u.features.astype(np.float64)
    distortion, artifact = spoof_channel(x.shape[1], seed)
    spoofed = x + spoof_scale * (x @ distortion.T + artifact)
    return Utterance(
        utt_id=u.utt_id + SPOOF_SUFFIX,
        speaker=u.speaker,
        genre=u.genre,
        is_spoof=True,
        features=spoofed.astype(np.float32) if spoof_scale else u.features.copy(),
    )


def with_spoofs(manifest: Sequence[Utterance], spoof_scale: float, seed: int) -> list[Utterance]:
    """Return ``manifest`` plus a spoofed counterpart for every bona fide item."""
    out = list(manifest)
    out.extend(spoofify(u, spoof_scale, seed) for u in manifest if not u.is_spoof)
    return out


def bona_fide_id(utt_id: str) -> str:
    return utt_id[: -len(SPOOF_SUFFIX)] if utt_id.endswith(SPOOF_SUFFIX) else utt_id


def spoof_id(utt_id: str) -> str:
    return utt_id + SPOOF_SUFFIX


# -- manifest files ---------------------------------------------------------

_HEADER = struct.Struct("<II")


def write_features(path: os.PathLike, features: np.ndarray) -> None:
    x = np.ascontiguousarray(features, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(*x.shape))
        f.write(x.tobytes())


def read_features(path: os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        frames, dim = _HEADER.unpack(f.read(_HEADER.size))
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != frames * dim:
        raise ValueError(f"{path}: expected {frames}x{dim} floats, found {data.size}")
    return data.reshape(frames, dim).astype(np.float32)


def write_manifest(manifest: Iterable[Utterance], directory: os.PathLike) -> Path:
    """Write ``manifest.tsv`` and one feature file per utterance under ``directory``."""
    directory = Path(directory)
    feat_dir = directory / "feats"
    feat_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for u in manifest:
        rel = Path("feats") / f"{u.utt_id}.f32"
        write_features(directory / rel, u.features)
        lines.append(f"{u.utt_id}\t{u.speaker}\t{u.genre}\t{int(u.is_spoof)}\t{rel.as_posix()}\n")
    path = directory / "manifest.tsv"
    with open(path, "w", encoding="utf-8") as f:
        f.writelines(lines)
    return path


def read_manifest(path: os.PathLike) -> list[Utterance]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.tsv"
    manifest = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5 or parts[3] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: malformed manifest line")
            utt_id, speaker, genre, flag, rel = parts
            manifest.append(
                Utterance(utt_id, speaker, genre, flag == "1", read_features(path.parent / rel))
            )
    return manifest


def index_by_id(manifest: Iterable[Utterance]) -> dict[str, Utterance]:
    table = {}
    for u in manifest:
        if u.utt_id in table:
            raise ValueError(f"duplicate utt_id {u.utt_id}")
        table[u.utt_id] = u
    return table


__all__ = [
    "DEFAULT_GENRES",
    "CorpusSpec",
    "CorpusSpecError",
    "Utterance",
    "synth_corpus",
    "spoofify",
    "spoof_channel",
    "with_spoofs",
    "write_manifest",
    "read_manifest",
    "write_features",
    "read_features",
    "index_by_id",
]
