"""Feature files, synthetic generators and train/test splitting."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..core import RngState
from ..sharding import Dataset


def _parse_header(line: str) -> dict[str, str]:
    if not line.startswith("#"):
        raise ValueError("feature file must start with a '#d=...,task=...' header")
    out = {}
    for part in line[1:].strip().split(","):
        if part:
            k, _, v = part.partition("=")
            out[k.strip()] = v.strip()
    return out


def format_feature_file(ds: Dataset) -> str:
    """Serialize with shortest round-trip float reprs, so reloading is exact."""
    if ds.task == "classification":
        header = f"#d={ds.feature_dim},task=cls,C={ds.n_classes}"
    else:
        header = f"#d={ds.feature_dim},task=reg"
    lines = [header]
    for pid, uid, x, t in zip(ds.point_ids, ds.user_ids, ds.X, ds.y):
        if "," in uid:
            raise ValueError(f"user id {uid!r} contains a comma")
        target = str(int(t)) if ds.task == "classification" else repr(float(t))
        lines.append(",".join([str(int(pid)), uid, target, *(repr(float(v)) for v in x)]))
    return "\n".join(lines) + "\n"


def write_feature_file(ds: Dataset, path: Path | str) -> None:
    Path(path).write_text(format_feature_file(ds), encoding="utf-8")


def read_feature_file(path: Path | str) -> Dataset:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise ValueError(f"{path}: empty feature file")
    header = _parse_header(text[0])
    d = int(header["d"])
    task = {"cls": "classification", "reg": "regression"}[header["task"]]
    n_classes = int(header["C"]) if task == "classification" else None
    ids, users, targets, feats = [], [], [], []
    for lineno, line in enumerate(text[1:], 2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3 + d:
            raise ValueError(f"{path}:{lineno}: expected {3 + d} fields, got {len(parts)}")
        ids.append(int(parts[0]))
        users.append(parts[1])
        targets.append(int(parts[2]) if task == "classification" else float(parts[2]))
        feats.append([float(v) for v in parts[3:]])
    X = np.array(feats, dtype=np.float64).reshape(len(feats), d)
    return Dataset(np.array(ids, dtype=np.int64), tuple(users), X, np.array(targets),
                   task, n_classes)


def read_feature_rows(path: Path | str) -> np.ndarray:
    """Feature matrix from either a feature file or bare comma-separated rows."""
    text = Path(path).read_text(encoding="utf-8")
    if text.startswith("#"):
        return read_feature_file(path).X
    rows = [[float(v) for v in line.split(",")] for line in text.splitlines() if line.strip()]
    return np.array(rows, dtype=np.float64)


@dataclass(frozen=True)
class SynthSpec:
    task: str = "classification"
    n_points: int = 600
    n_users: int = 40
    dim: int = 16
    n_classes: int = 6
    separation: float = 4.0
    noise: float = 0.5
    seed: int = 0

    @classmethod
    def parse(cls, text: str) -> "SynthSpec":
        """Parse ``"n=600,users=40,d=16,C=6,sep=4,seed=0,task=cls"``."""
        aliases = {"n": "n_points", "users": "n_users", "d": "dim", "C": "n_classes",
                   "sep": "separation", "noise": "noise", "seed": "seed", "task": "task"}
        kwargs: dict[str, object] = {}
        for part in text.split(","):
            if not part.strip():
                continue
            k, _, v = part.partition("=")
            name = aliases.get(k.strip())
            if name is None:
                raise ValueError(f"unknown synthetic-data key {k!r}")
            if name == "task":
                kwargs[name] = {"cls": "classification", "reg": "regression"}.get(v, v)
            elif name in ("separation", "noise"):
                kwargs[name] = float(v)
            else:
                kwargs[name] = int(v)
        return cls(**kwargs)


def gen_synthetic(spec: SynthSpec) -> Dataset:
    """Seeded Gaussian blobs (classification) or a noisy linear law (regression).

    Users own contiguous blocks of points. Class centres sit ``separation``
    unit-variance noise widths from the origin along mutually orthogonal
    directions (when ``d >= C``); labels cycle through the classes so every
    user sees each class.
    """
    n, users, d = spec.n_points, spec.n_users, spec.dim
    if n < 1 or d < 1 or users < 1:
        raise ValueError("n_points, n_users and dim must be positive")
    if users > n:
        raise ValueError("more users than points")
    gen = RngState(spec.seed, (), "synthetic").generator()
    blocks = np.array_split(np.arange(n), users)
    user_ids = [""] * n
    for u, block in enumerate(blocks):
        for i in block:
            user_ids[i] = f"u{u:03d}"

    if spec.task == "classification":
        C = spec.n_classes
        if C < 2:
            raise ValueError("need at least two classes")
        if d >= C:
            q, _ = np.linalg.qr(gen.standard_normal((d, C)))
            directions = q.T
        else:
            raw = gen.standard_normal((C, d))
            directions = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        labels = np.arange(n) % C
        X = spec.separation * directions[labels] + gen.standard_normal((n, d))
        y = labels
        n_classes: int | None = C
    elif spec.task == "regression":
        w = gen.standard_normal(d) / np.sqrt(d)
        X = gen.standard_normal((n, d))
        y = X @ w + spec.noise * gen.standard_normal(n)
        n_classes = None
    else:
        raise ValueError(f"unknown task {spec.task!r}")
    return Dataset(np.arange(n, dtype=np.int64), tuple(user_ids), X, y, spec.task, n_classes)


def train_test_split(ds: Dataset, test_fraction: float = 0.2,
                     seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    perm = RngState(seed, (), "split").generator().permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    test_rows = np.sort(perm[:n_test])
    train_rows = np.sort(perm[n_test:])
    return ds.subset(train_rows), ds.subset(test_rows)
