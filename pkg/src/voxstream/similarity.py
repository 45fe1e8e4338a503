"""Monte-Carlo field features, pairwise field dissimilarity, and classical MDS.

Feature extraction draws a fixed, seeded sequence of sample positions inside
the ensemble's common spatial domain (optionally restricted by a binary mask)
and stores one record of sampled values per (member, time step) in a
memory-mapped file per field. Records carry completion bits, so an interrupted
extraction resumes exactly where it stopped and reproduces the uninterrupted
file bit for bit.

Scalar dissimilarity is the mean absolute difference of ensemble-range
normalized samples; vector fields split into magnitude and direction, the
direction part being the mean angle divided by pi, combined 50/50. All pairs
fill a symmetric zero-diagonal distance matrix stored as its upper triangle,
which classical multidimensional scaling (double centering plus a deterministic
cyclic Jacobi eigensolve) projects into k dimensions.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateInput,
    EmptySampleDomain,
    IncompleteFeatures,
    MissingField,
    SampleMismatch,
    VoxstreamError,
)
from .ensemble import EnsembleDataset
from .volume import SliceVolume

FEATURE_MAGIC = b"VXSF"
MATRIX_MAGIC = b"VXDM"
ZERO_MAGNITUDE = 1e-12


# -- feature files ---------------------------------------------------------------


def _align(n: int, to: int = 16) -> int:
    return (n + to - 1) // to * to


class FeatureFile:
    """Memory-mapped per-field feature store with a completion bitmap."""

    def __init__(self, path: Path, header: dict, mode: str):
        self.path = Path(path)
        self.header = header
        self.field = header["field"]
        self.kind = header["kind"]
        self.n_samples = int(header["n_samples"])
        self.seed = int(header["seed"])
        self.records = [tuple(r) for r in header["records"]]
        self.value_range = (tuple(header["value_range"])
                            if header.get("value_range") is not None else None)
        n_rec = len(self.records)
        n = self.n_samples
        self.record_size = n if self.kind == "scalar" else 4 * n
        head_len = _align(8 + header["_header_bytes"])
        pos_off = head_len
        data_off = pos_off + n * 3 * 8
        stats_off = data_off + n_rec * self.record_size * 4
        done_off = stats_off + n_rec * 2 * 8
        self.total_size = done_off + n_rec
        self.positions = np.memmap(self.path, dtype="<f8", mode=mode,
                                   offset=pos_off, shape=(n, 3))
        self.data = np.memmap(self.path, dtype="<f4", mode=mode,
                              offset=data_off, shape=(n_rec, self.record_size))
        self.stats = np.memmap(self.path, dtype="<f8", mode=mode,
                               offset=stats_off, shape=(n_rec, 2))
        self.completion = np.memmap(self.path, dtype="u1", mode=mode,
                                    offset=done_off, shape=(n_rec,))

    # construction -------------------------------------------------------------

    @classmethod
    def create(cls, path, field, kind, positions, records, seed,
               value_range=None, exhaustive=False) -> "FeatureFile":
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {
            "version": 1,
            "field": field,
            "kind": kind,
            "n_samples": int(len(positions)),
            "seed": int(seed),
            "exhaustive": bool(exhaustive),
            "records": [list(r) for r in records],
            "value_range": list(value_range) if value_range is not None else None,
        }
        raw = json.dumps(header, sort_keys=True).encode("utf-8")
        header["_header_bytes"] = len(raw)
        head_len = _align(8 + len(raw))
        ff_size = cls._file_size(header, head_len)
        with open(path, "wb") as f:
            f.write(FEATURE_MAGIC)
            f.write(len(raw).to_bytes(4, "little"))
            f.write(raw)
            f.truncate(ff_size)
        ff = cls(path, header, mode="r+")
        ff.positions[:] = positions
        ff.positions.flush()
        return ff

    @staticmethod
    def _file_size(header, head_len) -> int:
        n = int(header["n_samples"])
        n_rec = len(header["records"])
        rec = n if header["kind"] == "scalar" else 4 * n
        return head_len + n * 3 * 8 + n_rec * rec * 4 + n_rec * 2 * 8 + n_rec

    @classmethod
    def open(cls, path, mode: str = "r+") -> "FeatureFile":
        path = Path(path)
        with open(path, "rb") as f:
            if f.read(4) != FEATURE_MAGIC:
                raise VoxstreamError(f"{path} is not a feature file")
            hlen = int.from_bytes(f.read(4), "little")
            header = json.loads(f.read(hlen).decode("utf-8"))
        header["_header_bytes"] = hlen
        return cls(path, header, mode=mode)

    # record access --------------------------------------------------------------

    def is_complete(self) -> bool:
        return bool((np.asarray(self.completion) != 0).all())

    def write_record(self, i: int, values: np.ndarray, stats: tuple[float, float]):
        self.data[i] = values.astype(np.float32).ravel()
        self.stats[i] = stats
        self.data.flush()
        self.stats.flush()
        self.completion[i] = 1
        self.completion.flush()

    def record(self, i: int):
        if not self.completion[i]:
            raise IncompleteFeatures(f"record {i} of {self.path.name} not extracted")
        row = np.asarray(self.data[i])
        if self.kind == "scalar":
            return row
        n = self.n_samples
        return row[:n], row[n:].reshape(n, 3)

    def magnitude_range(self) -> tuple[float, float]:
        if not self.is_complete():
            raise IncompleteFeatures(f"{self.path.name} has unextracted records")
        st = np.asarray(self.stats)
        return float(st[:, 0].min()), float(st[:, 1].max())

    def normalization(self) -> tuple[float, float]:
        if self.kind == "scalar":
            if self.value_range is not None:
                return self.value_range
            st = np.asarray(self.stats)
            return float(st[:, 0].min()), float(st[:, 1].max())
        return self.magnitude_range()

    def distance(self, i: int, j: int) -> float:
        if self.kind == "scalar":
            lo, hi = self.normalization()
            return scalar_distance(self.record(i), self.record(j), lo, hi)
        lo, hi = self.magnitude_range()
        mi, di = self.record(i)
        mj, dj = self.record(j)
        return vector_distance(mi, di, mj, dj, lo, hi)


# -- sampling ----------------------------------------------------------------------


def _mask_lookup(mask: SliceVolume):
    arr = mask.read_full()[0] != 0
    if not arr.any():
        raise EmptySampleDomain("sample mask has no foreground voxels")
    meta = mask.meta

    def inside(points: np.ndarray) -> np.ndarray:
        idx = np.floor(
            (points - np.asarray(meta.offset_mm)) / np.asarray(meta.spacing_mm)
        ).astype(np.int64)
        ok = ((idx >= 0) & (idx < np.asarray(meta.dimensions))).all(axis=1)
        out = np.zeros(len(points), dtype=bool)
        sel = idx[ok]
        out[ok] = arr[sel[:, 2], sel[:, 1], sel[:, 0]]
        return out

    return inside


def sample_positions(dataset: EnsembleDataset, n_samples: int, seed: int,
                     mask: SliceVolume | None = None) -> np.ndarray:
    """Seeded counter-based pseudo-random positions in the common domain (mm)."""
    lo = np.asarray(dataset.common_bounds[0], dtype=np.float64)
    hi = np.asarray(dataset.common_bounds[1], dtype=np.float64)
    if (hi <= lo).any():
        raise EmptySampleDomain(f"common spatial domain is empty: {lo}..{hi}")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    inside = _mask_lookup(mask) if mask is not None else None
    out = np.empty((n_samples, 3), dtype=np.float64)
    have = 0
    attempts = 0
    while have < n_samples:
        batch = rng.random((max(n_samples, 1024), 3)) * (hi - lo) + lo
        if inside is not None:
            batch = batch[inside(batch)]
        take = min(n_samples - have, len(batch))
        out[have:have + take] = batch[:take]
        have += take
        attempts += 1
        if attempts > 1000 and have == 0:
            raise EmptySampleDomain("mask rejects all samples in the common domain")
    return out


def exhaustive_positions(meta) -> np.ndarray:
    """Voxel-center positions of a full grid in payload (zyx) order."""
    nx, ny, nz = meta.dimensions
    sx, sy, sz = meta.spacing_mm
    ox, oy, oz = meta.offset_mm
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx),
                          indexing="ij")
    pts = np.stack([
        (x.ravel() + 0.5) * sx + ox,
        (y.ravel() + 0.5) * sy + oy,
        (z.ravel() + 0.5) * sz + oz,
    ], axis=1)
    return pts


def _voxel_indices(points: np.ndarray, meta) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    idx = np.floor(
        (points - np.asarray(meta.offset_mm)) / np.asarray(meta.spacing_mm)
    ).astype(np.int64)
    idx = np.clip(idx, 0, np.asarray(meta.dimensions) - 1)
    return idx[:, 2], idx[:, 1], idx[:, 0]


def extract_features(dataset: EnsembleDataset, fields, n_samples: int, seed: int,
                     out_dir: str | os.PathLike, mask: SliceVolume | None = None,
                     exhaustive: bool = False, threads: int = 1,
                     progress=None) -> dict[str, FeatureFile]:
    """Extract per-(member, step) sample records for each field.

    Every required volume is loaded exactly once per run; records whose
    completion bit is already set are skipped, which makes interrupted runs
    resumable with bit-identical results.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fields = list(fields)
    records = []
    for m in dataset.members:
        for i, s in enumerate(m.steps):
            records.append((m.name, i, s.timestamp))

    files: dict[str, FeatureFile] = {}
    positions = None
    for fname in fields:
        channels = dataset.field_channels.get(fname)
        if channels is None:
            raise MissingField(f"field {fname!r} not present in the dataset")
        if channels not in (1, 3):
            raise VoxstreamError(f"field {fname!r} has {channels} channels; "
                                 "expected scalar (1) or vector (3)")
        kind = "scalar" if channels == 1 else "vector"
        path = out_dir / f"{fname}.feat"
        if path.is_file():
            ff = FeatureFile.open(path)
            if ff.seed != seed or ff.records != records:
                raise SampleMismatch(
                    f"{path} was extracted with different parameters"
                )
            files[fname] = ff
            continue
        if positions is None:
            if exhaustive:
                ref0 = dataset.volume_ref(records[0][0], 0, fname)
                positions = exhaustive_positions(ref0.meta)
                n_samples = len(positions)
            else:
                positions = sample_positions(dataset, n_samples, seed, mask)
        vr = dataset.field_ranges.get(fname)
        files[fname] = FeatureFile.create(
            path, fname, kind, positions, records, seed,
            value_range=vr[0] if (kind == "scalar" and vr) else None,
            exhaustive=exhaustive,
        )

    tasks = []
    for fname, ff in files.items():
        for i, (member, step, _) in enumerate(ff.records):
            if not ff.completion[i]:
                tasks.append((ff, i, member, step, fname))

    done = 0

    def run(task):
        ff, i, member, step, fname = task
        ref = dataset.volume_ref(member, step, fname)
        arr = ref.open().read_full()
        zi, yi, xi = _voxel_indices(np.asarray(ff.positions), ref.meta)
        if ff.kind == "scalar":
            vals = arr[0, zi, yi, xi]
            stats = (float(arr.min()), float(arr.max()))
            ff.write_record(i, vals, stats)
        else:
            mag_full = np.sqrt(
                np.sum(arr.astype(np.float64) ** 2, axis=0)
            )
            mag = mag_full[zi, yi, xi]
            comp = arr[:, zi, yi, xi].astype(np.float64)
            safe = np.where(mag < ZERO_MAGNITUDE, 1.0, mag)
            unit = (comp / safe).T
            unit[mag < ZERO_MAGNITUDE] = 0.0
            rec = np.concatenate([mag.astype(np.float32).ravel(),
                                  unit.astype(np.float32).ravel()])
            ff.write_record(i, rec, (float(mag_full.min()), float(mag_full.max())))

    if threads <= 1:
        for t in tasks:
            run(t)
            done += 1
            if progress is not None:
                progress(done / max(len(tasks), 1))
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for _ in pool.map(run, tasks):
                done += 1
                if progress is not None:
                    progress(done / max(len(tasks), 1))
    return files


# -- distances -----------------------------------------------------------------------


def scalar_distance(a: np.ndarray, b: np.ndarray, lo: float, hi: float) -> float:
    """Mean absolute difference of range-normalized samples, in [0, 1]."""
    if a.shape != b.shape:
        raise SampleMismatch(f"sample shapes differ: {a.shape} vs {b.shape}")
    span = hi - lo
    if span <= 0:
        return 0.0
    d = float(np.mean(np.abs(a.astype(np.float64) - b.astype(np.float64)))) / span
    return min(max(d, 0.0), 1.0)


def vector_distance(mag_a, dir_a, mag_b, dir_b, lo: float, hi: float) -> float:
    """50/50 combination of magnitude distance and mean angle / pi."""
    if mag_a.shape != mag_b.shape or dir_a.shape != dir_b.shape:
        raise SampleMismatch("vector records have differing sample counts")
    d_mag = scalar_distance(mag_a, mag_b, lo, hi)
    za = mag_a < ZERO_MAGNITUDE
    zb = mag_b < ZERO_MAGNITUDE
    dots = np.einsum("ij,ij->i", dir_a.astype(np.float64), dir_b.astype(np.float64))
    ang = np.arccos(np.clip(dots, -1.0, 1.0))
    ang = np.where(za & zb, 0.0, ang)
    ang = np.where(za ^ zb, np.pi, ang)
    d_dir = float(np.mean(ang)) / np.pi
    return 0.5 * d_mag + 0.5 * d_dir


def field_distance(a, b, kind: str = "scalar", value_range=(0.0, 1.0)) -> float:
    """Distance between two raw records (arrays as stored in a FeatureFile)."""
    if kind == "scalar":
        return scalar_distance(np.asarray(a), np.asarray(b), *value_range)
    ma, da = a
    mb, db = b
    return vector_distance(np.asarray(ma), np.asarray(da),
                           np.asarray(mb), np.asarray(db), *value_range)


# -- distance matrix -----------------------------------------------------------------


class DistanceMatrix:
    def __init__(self, index: list[tuple], tri: np.ndarray):
        self.index = [tuple(r) for r in index]
        self.n = len(self.index)
        expected = self.n * (self.n - 1) // 2
        if len(tri) != expected:
            raise VoxstreamError(f"triangle length {len(tri)} != {expected}")
        tri = np.asarray(tri, dtype=np.float32)
        if len(tri) and (tri.min() < -1e-6 or tri.max() > 1.0 + 1e-6):
            raise VoxstreamError("distances must lie in [0, 1]")
        self.tri = np.clip(tri, 0.0, 1.0)

    def _pos(self, i: int, j: int) -> int:
        if i > j:
            i, j = j, i
        return i * self.n - i * (i + 1) // 2 + (j - i - 1)

    def at(self, i: int, j: int) -> float:
        if i == j:
            return 0.0
        return float(self.tri[self._pos(i, j)])

    def full(self) -> np.ndarray:
        m = np.zeros((self.n, self.n), dtype=np.float64)
        iu = np.triu_indices(self.n, k=1)
        m[iu] = self.tri
        m.T[iu] = self.tri
        return m

    def submatrix(self, keep: list[int]) -> "DistanceMatrix":
        keep = list(keep)
        full = self.full()[np.ix_(keep, keep)]
        iu = np.triu_indices(len(keep), k=1)
        return DistanceMatrix([self.index[i] for i in keep],
                              full[iu].astype(np.float32))

    def save(self, path):
        header = {"version": 1, "records": [list(r) for r in self.index]}
        raw = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(MATRIX_MAGIC)
            f.write(len(raw).to_bytes(4, "little"))
            f.write(raw)
            f.write(self.tri.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "DistanceMatrix":
        with open(path, "rb") as f:
            if f.read(4) != MATRIX_MAGIC:
                raise VoxstreamError(f"{path} is not a distance matrix file")
            hlen = int.from_bytes(f.read(4), "little")
            header = json.loads(f.read(hlen).decode("utf-8"))
            tri = np.frombuffer(f.read(), dtype="<f4")
        return cls([tuple(r) for r in header["records"]], tri)


def distance_matrix(features: dict[str, FeatureFile] | FeatureFile,
                    fields=None, threads: int = 1,
                    path: str | os.PathLike | None = None) -> DistanceMatrix:
    """All-pairs distances, averaged entry-wise over the requested fields."""
    if isinstance(features, FeatureFile):
        features = {features.field: features}
    fields = list(fields) if fields is not None else sorted(features)
    files = [features[f] for f in fields]
    index = files[0].records
    for ff in files:
        if ff.records != index:
            raise SampleMismatch("feature files cover different records")
        if not ff.is_complete():
            raise IncompleteFeatures(f"{ff.path.name} has unextracted records")

    n = len(index)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    acc = np.zeros(len(pairs), dtype=np.float64)
    for ff in files:
        tri = np.empty(len(pairs), dtype=np.float64)
        if ff.kind == "scalar":
            lo, hi = ff.normalization()
            data = np.asarray(ff.data, dtype=np.float64)
            span = hi - lo

            def compute_range(lo_i, hi_i):
                for p in range(lo_i, hi_i):
                    i, j = pairs[p]
                    if span <= 0:
                        tri[p] = 0.0
                    else:
                        tri[p] = min(max(
                            float(np.mean(np.abs(data[i] - data[j]))) / span, 0.0), 1.0)
        else:
            lo, hi = ff.magnitude_range()
            nsamp = ff.n_samples
            data = np.asarray(ff.data, dtype=np.float64)

            def compute_range(lo_i, hi_i, lo_=lo, hi_=hi, nsamp_=nsamp, data_=data):
                for p in range(lo_i, hi_i):
                    i, j = pairs[p]
                    tri[p] = vector_distance(
                        data_[i, :nsamp_], data_[i, nsamp_:].reshape(nsamp_, 3),
                        data_[j, :nsamp_], data_[j, nsamp_:].reshape(nsamp_, 3),
                        lo_, hi_,
                    )

        if threads <= 1 or len(pairs) < 64:
            compute_range(0, len(pairs))
        else:
            chunk = (len(pairs) + threads - 1) // threads
            spans = [(t * chunk, min((t + 1) * chunk, len(pairs)))
                     for t in range(threads)]
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(lambda se: compute_range(*se), spans))
        acc += tri
    acc /= len(files)
    dm = DistanceMatrix(index, acc.astype(np.float32))
    if path is not None:
        dm.save(path)
    return dm


# -- classical MDS ---------------------------------------------------------------------


def jacobi_eigh(A: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Deterministic regardless of BLAS threading; returns (eigenvalues,
    eigenvectors) sorted by descending eigenvalue.
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    V = np.eye(n)
    norm = np.linalg.norm(A)
    if norm == 0:
        return np.zeros(n), V
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2) * 2)
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp = A[p, :].copy()
                rq = A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                cp = A[:, p].copy()
                cq = A[:, q].copy()
                A[:, p] = c * cp - s * cq
                A[:, q] = s * cp + c * cq
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


@dataclass
class Embedding:
    points: np.ndarray          # (n, k)
    spectrum: np.ndarray        # all n eigenvalues, descending
    index: list[tuple]          # (member, step, timestamp) per row

    def to_json(self, path=None):
        doc = {
            "points": [[float(v) for v in row] for row in self.points],
            "index": [[r[0], int(r[1])] for r in self.index],
            "spectrum": [float(v) for v in self.spectrum],
        }
        if path is not None:
            Path(path).write_text(json.dumps(doc), encoding="utf-8")
        return doc

    def to_csv(self, path):
        k = self.points.shape[1]
        with open(path, "w") as f:
            cols = ",".join(f"c{i + 1}" for i in range(k))
            f.write(f"member,step,{cols}\n")
            for (member, step, _), row in zip(self.index, self.points):
                coords = ",".join(repr(float(v)) for v in row)
                f.write(f"{member},{step},{coords}\n")


def mds_embed(matrix: DistanceMatrix | np.ndarray, k: int = 2) -> Embedding:
    """Classical MDS: double-center the squared distances and eigendecompose.

    Accepts a DistanceMatrix or a raw symmetric (n, n) array. Coordinates are
    the top-k eigenvectors scaled by sqrt(eigenvalue); negative eigenvalues
    contribute zero columns. Each column's largest-magnitude entry is made
    non-negative for a deterministic sign.
    """
    if isinstance(matrix, np.ndarray):
        D = np.asarray(matrix, dtype=np.float64)
        if D.ndim != 2 or D.shape[0] != D.shape[1]:
            raise DegenerateInput(f"distance matrix must be square, got {D.shape}")
        index = [("point", i, float(i)) for i in range(D.shape[0])]
    else:
        D = matrix.full()
        index = matrix.index
    n = D.shape[0]
    if n < 2:
        raise DegenerateInput(f"need at least 2 points, got {n}")
    if k < 1:
        raise DegenerateInput(f"k must be >= 1, got {k}")
    S = D * D
    row = S.mean(axis=1, keepdims=True)
    col = S.mean(axis=0, keepdims=True)
    B = -0.5 * (S - row - col + S.mean())
    B = (B + B.T) / 2.0
    w, V = jacobi_eigh(B)
    pts = np.zeros((n, k))
    for c in range(min(k, n)):
        if w[c] > 0:
            v = V[:, c] * np.sqrt(w[c])
            pivot = int(np.argmax(np.abs(v)))
            if v[pivot] < 0:
                v = -v
            pts[:, c] = v
    return Embedding(points=pts, spectrum=w, index=index)


def reembed_selection(matrix: DistanceMatrix, members, k: int = 2) -> Embedding:
    """Re-embed the sub-matrix of the selected members (no re-extraction)."""
    members = set(members)
    keep = [i for i, (m, _, _) in enumerate(matrix.index) if m in members]
    if not keep:
        raise DegenerateInput("selection matches no records")
    return mds_embed(matrix.submatrix(keep), k)


def embedding_curves(embedding: Embedding) -> list[dict]:
    """One time-ordered polyline per member with a normalized time parameter."""
    times = [r[2] for r in embedding.index]
    t0, t1 = min(times), max(times)
    span = (t1 - t0) or 1.0
    by_member: dict[str, list[int]] = {}
    for i, (m, _, _) in enumerate(embedding.index):
        by_member.setdefault(m, []).append(i)
    curves = []
    for m in sorted(by_member):
        rows = sorted(by_member[m], key=lambda i: (embedding.index[i][2],
                                                   embedding.index[i][1]))
        curves.append({
            "member": m,
            "points": [[float(v) for v in embedding.points[i]] for i in rows],
            "steps": [int(embedding.index[i][1]) for i in rows],
            "t_norm": [(embedding.index[i][2] - t0) / span for i in rows],
        })
    return curves
