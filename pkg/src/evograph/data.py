"""Dataset files, validation and the synthetic longitudinal connectome generator.

On disk a dataset is a directory holding ``manifest.json`` and one CSV per
(subject, timepoint).  Each CSV has ``n_r`` rows of ``n_r`` comma-separated
decimals and no header.  The manifest looks like::

    {
      "format": "evograph-manifest/1",
      "n_r": 35,
      "timepoints": 3,
      "subjects": [
        {"id": "sub000", "files": ["sub000/t0.csv", "sub000/t1.csv", "sub000/t2.csv"]}
      ]
    }

File paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .graphcore import DEFAULT_ROIS, ConnectivityMatrix, LongitudinalSample

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "evograph-manifest/1"
MANIFEST_NAME = "manifest.json"
TOLERANCE = 1e-9


class DataError(ValueError):
    pass


@dataclass
class DatasetManifest:
    root: Path
    subjects: list[tuple[str, list[str]]] = field(default_factory=list)
    n_r: int = DEFAULT_ROIS
    timepoints: int = 3

    @classmethod
    def read(cls, path) -> DatasetManifest:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: cannot read manifest ({exc})") from exc
        if raw.get("format") != MANIFEST_FORMAT:
            raise DataError(f"{path}: unknown manifest format {raw.get('format')!r}")
        subjects = [(str(s["id"]), [str(f) for f in s["files"]]) for s in raw.get("subjects", [])]
        return cls(path.parent, subjects, int(raw["n_r"]), int(raw["timepoints"]))

    def write(self) -> Path:
        payload = {
            "format": MANIFEST_FORMAT,
            "n_r": self.n_r,
            "timepoints": self.timepoints,
            "subjects": [{"id": sid, "files": files} for sid, files in self.subjects],
        }
        path = Path(self.root) / MANIFEST_NAME
        path.write_text(json.dumps(payload, indent=2) + "\n")
        return path


def _fmt(x: float) -> str:
    return repr(float(x))


def write_matrix_csv(path, weights: np.ndarray) -> None:
    lines = [",".join(_fmt(v) for v in row) for row in np.asarray(weights)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix_csv(path, n_r: int | None = None, tol: float = TOLERANCE) -> ConnectivityMatrix:
    """Parse and validate one matrix file.

    Asymmetry is averaged away with a warning; out-of-range entries, a
    non-zero diagonal or unparsable cells beyond ``tol`` raise
    :class:`DataError` naming the file, row and column (0-based).
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    rows = []
    for r, line in enumerate(l for l in text.splitlines() if l.strip()):
        row = []
        for c, cell in enumerate(line.split(",")):
            try:
                row.append(float(cell))
            except ValueError:
                raise DataError(f"{path}: row {r}, column {c}: cannot parse {cell.strip()!r}") from None
        rows.append(row)
    n = len(rows)
    for r, row in enumerate(rows):
        if len(row) != n:
            raise DataError(f"{path}: row {r} has {len(row)} columns, expected {n}")
    if n_r is not None and n != n_r:
        raise DataError(f"{path}: matrix is {n}x{n}, manifest says n_r={n_r}")
    w = np.array(rows, dtype=np.float64).reshape(n, n)
    bad = ~np.isfinite(w) | (w < -tol) | (w > 1.0 + tol)
    if bad.any():
        r, c = map(int, np.argwhere(bad)[0])
        raise DataError(f"{path}: row {r}, column {c}: value {w[r, c]!r} outside [0, 1]")
    diag = np.abs(np.diag(w)) > tol
    if diag.any():
        k = int(np.argmax(diag))
        raise DataError(f"{path}: row {k}, column {k}: diagonal entry {w[k, k]!r} is not zero")
    if not np.array_equal(w, w.T):
        gap = float(np.abs(w - w.T).max())
        if gap > tol:
            log.warning("%s: asymmetric by up to %.3g, symmetrizing", path, gap)
        w = (w + w.T) * 0.5
    w = np.clip(w, 0.0, 1.0)
    np.fill_diagonal(w, 0.0)
    return ConnectivityMatrix(w)


def load_dataset(manifest) -> list[LongitudinalSample]:
    """Load every subject in ``manifest`` (a DatasetManifest or path), sorted by id."""
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.read(manifest)
    if not manifest.subjects:
        log.warning("manifest under %s lists no subjects", manifest.root)
        return []
    samples = []
    for sid, files in sorted(manifest.subjects):
        if len(files) != manifest.timepoints:
            raise DataError(f"subject {sid}: {len(files)} files, manifest says {manifest.timepoints} timepoints")
        graphs = [read_matrix_csv(Path(manifest.root) / f, manifest.n_r) for f in files]
        samples.append(LongitudinalSample(sid, tuple(graphs)))
    log.info("loaded %d subjects, n_r=%d", len(samples), manifest.n_r)
    return samples


def save_dataset(samples, root) -> Path:
    """Write samples as CSVs plus a manifest under ``root``; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if samples:
        n_r, tps = samples[0].n_r, samples[0].timepoints
    else:
        n_r, tps = DEFAULT_ROIS, 0
    entries = []
    for s in samples:
        if s.n_r != n_r or s.timepoints != tps:
            raise DataError(f"subject {s.subject_id}: shape differs from the first subject")
        (root / s.subject_id).mkdir(exist_ok=True)
        files = []
        for t, g in enumerate(s.graphs):
            rel = f"{s.subject_id}/t{t}.csv"
            write_matrix_csv(root / rel, g.weights)
            files.append(rel)
        entries.append((s.subject_id, files))
    return DatasetManifest(root, entries, n_r, tps).write()


@dataclass(frozen=True)
class SyntheticConfig:
    """Cohort-level sparse drift plus per-subject noise.

    The drifting edge set and its signs are drawn once and shared by all
    subjects, so the trend is learnable from a baseline graph.
    """

    n_subjects: int = 30
    n_r: int = DEFAULT_ROIS
    timepoints: int = 3
    drift_scale: float = 0.05
    noise_scale: float = 0.01
    sparsity: float = 0.2
    seed: int = 7

    def __post_init__(self):
        if self.n_subjects < 0:
            raise ValueError("n_subjects must be >= 0")
        if self.n_r < 2:
            raise ValueError("n_r must be >= 2")
        if self.timepoints < 2:
            raise ValueError("timepoints must be >= 2")
        if self.drift_scale < 0 or self.noise_scale < 0:
            raise ValueError("drift_scale and noise_scale must be >= 0")
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValueError("sparsity must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def _sym(upper: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, n))
    iu = np.triu_indices(n, 1)
    out[iu] = upper
    return out + out.T


def _valid(w: np.ndarray) -> np.ndarray:
    w = np.clip(w, 0.0, 1.0)
    np.fill_diagonal(w, 0.0)
    return w


def generate_synthetic(cfg: SyntheticConfig) -> list[LongitudinalSample]:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_r
    n_edges = n * (n - 1) // 2
    chosen = rng.random(n_edges) < cfg.sparsity
    signs = rng.choice([-1.0, 1.0], size=n_edges)
    drift = _sym(chosen * signs * cfg.drift_scale, n)
    samples = []
    for s in range(cfg.n_subjects):
        u = rng.random((n, n))
        w = _valid((u + u.T) * 0.5)
        graphs = [ConnectivityMatrix(w)]
        for _ in range(cfg.timepoints - 1):
            noise = _sym(rng.normal(0.0, 1.0, n_edges) * cfg.noise_scale, n)
            w = _valid(w + drift + noise)
            graphs.append(ConnectivityMatrix(w))
        samples.append(LongitudinalSample(f"sub{s:03d}", tuple(graphs)))
    return samples
