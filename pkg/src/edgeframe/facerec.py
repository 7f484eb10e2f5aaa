"""Eigenface recognition: training, projection, classification, detection.

Training follows the classic small-matrix route: with N gallery images as
rows of X (pixels scaled to [0, 1]) and difference vectors Phi = X - mean,
the eigenpairs of the big d x d scatter matrix are recovered from the small
N x N matrix L = Phi Phi^T.  The eigenfaces are u_i = Phi^T v_i, normalized
to unit length, with each one's largest-magnitude component forced positive
so serialized models are identical across runs and platforms.

The eigensolver is cyclic Jacobi on the symmetric N x N matrix: sweeps run
until the off-diagonal Frobenius norm drops below 1e-12 (at most 100
sweeps).  Detection slides a scaled window over the frame, area-averages it
down to model size, and thresholds the distance from face space
DFFS = ||phi - U U^T phi||; overlapping candidates are pruned by greedy
lowest-DFFS non-maximum suppression.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .pgm import GrayImage
from .wire import FramePayload

UNKNOWN = None  # classify() returns None as the open-set rejection label

EIGENVALUE_FLOOR_REL = 1e-10
DEFAULT_SCALES = (1.0, 1.5, 2.0)
NMS_IOU_THRESHOLD = 0.3
MODEL_MAGIC = b"EFM1"


class FaceRecError(Exception):
    pass


class GalleryTooSmall(FaceRecError):
    pass


class DimensionMismatch(FaceRecError):
    pass


class InsufficientVariance(FaceRecError):
    pass


class FrameTooSmall(FaceRecError):
    pass


@dataclass(frozen=True)
class GalleryImage:
    label: str
    width: int
    height: int
    pixels: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if len(self.pixels) != self.width * self.height:
            raise DimensionMismatch(
                f"{self.label}: {len(self.pixels)} bytes for "
                f"{self.width}x{self.height}")


@dataclass(frozen=True)
class FaceModel:
    width: int
    height: int
    n_train: int
    k: int
    mean_face: np.ndarray          # (d,)
    eigenvalues: np.ndarray        # (k,) descending
    eigenfaces: np.ndarray         # (k, d) orthonormal rows
    class_centers: dict[str, np.ndarray]
    theta_face: float
    theta_dffs: float


@dataclass(frozen=True)
class ResultBox:
    x: int
    y: int
    w: int
    h: int
    label: str | None              # None means UNKNOWN
    distance: float


@dataclass(frozen=True)
class RecognitionResult:
    frame_seq: int
    processing_time_ms: float
    boxes: tuple[ResultBox, ...]


@dataclass(frozen=True)
class DetectedBox:
    x: int
    y: int
    w: int
    h: int
    dffs: float


# ---------------------------------------------------------------------------
# Eigensolver
# ---------------------------------------------------------------------------

def jacobi_eigh(matrix: np.ndarray, tol: float = 1e-12,
                max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decompose a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with eigenvalues in descending order
    and eigenvectors as columns.  Deterministic for a given input.
    """
    a = np.array(matrix, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    v = np.eye(n)
    prev_off = math.inf
    for _ in range(max_sweeps):
        # norm of the off-diagonal part, computed directly: subtracting
        # squared sums instead would cancel catastrophically near convergence
        off_part = a.copy()
        np.fill_diagonal(off_part, 0.0)
        off = float(np.linalg.norm(off_part))
        if off < tol or off >= prev_off:  # converged, or at the rounding floor
            break
        prev_off = off
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(apq) < 1e-300 * abs(diff):
                    t = apq / diff  # rotation angle ~ 0, avoids overflow in theta
                else:
                    theta = diff / (2.0 * apq)
                    t = math.copysign(1.0, theta) / (abs(theta)
                                                     + math.hypot(1.0, theta))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                app, aqq = a[p, p], a[q, q]
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                new_p = c * col_p - s * col_q
                new_q = s * col_p + c * col_q
                a[:, p] = new_p
                a[:, q] = new_q
                a[p, :] = new_p
                a[q, :] = new_q
                a[p, p] = c * c * app - 2.0 * s * c * apq + s * s * aqq
                a[q, q] = s * s * app + 2.0 * s * c * apq + c * c * aqq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    eigenvalues = np.diag(a).copy()
    order = np.argsort(-eigenvalues, kind="stable")
    return eigenvalues[order], v[:, order]


# ---------------------------------------------------------------------------
# Training and projection
# ---------------------------------------------------------------------------

def _gallery_matrix(gallery: list[GalleryImage]) -> tuple[np.ndarray, int, int]:
    if len(gallery) < 2:
        raise GalleryTooSmall("need at least 2 gallery images")
    if len({img.label for img in gallery}) < 2:
        raise GalleryTooSmall("need at least 2 distinct labels")
    w, h = gallery[0].width, gallery[0].height
    for img in gallery:
        if (img.width, img.height) != (w, h):
            raise DimensionMismatch(
                f"{img.label} is {img.width}x{img.height}, gallery is {w}x{h}")
    rows = [np.frombuffer(img.pixels, dtype=np.uint8).astype(float) / 255.0
            for img in gallery]
    return np.vstack(rows), w, h


def train(gallery: list[GalleryImage], k: int) -> FaceModel:
    """Fit an eigenface model with up to k components."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x, w, h = _gallery_matrix(gallery)
    n = x.shape[0]
    mean = x.mean(axis=0)
    phi = x - mean
    small = phi @ phi.T  # N x N, same nonzero spectrum as the d x d scatter
    eigenvalues, vectors = jacobi_eigh(small)
    lam_max = float(eigenvalues[0])
    if lam_max <= 0.0:
        raise InsufficientVariance("gallery has no variation around its mean")
    surviving = int(np.sum(eigenvalues >= EIGENVALUE_FLOOR_REL * lam_max))
    if surviving == 0:
        raise InsufficientVariance("all eigenvalues vanish")
    k_eff = min(k, surviving)
    faces = np.empty((k_eff, phi.shape[1]))
    for i in range(k_eff):
        u = phi.T @ vectors[:, i]
        u /= np.linalg.norm(u)
        if u[int(np.argmax(np.abs(u)))] < 0:
            u = -u
        faces[i] = u
    weights = phi @ faces.T  # (N, k_eff)

    centers: dict[str, np.ndarray] = {}
    for label in sorted({img.label for img in gallery}):
        mask = np.array([img.label == label for img in gallery])
        centers[label] = weights[mask].mean(axis=0)

    center_list = list(centers.values())
    max_pair = max(
        float(np.linalg.norm(a - b))
        for i, a in enumerate(center_list) for b in center_list[i + 1:])
    theta_face = 0.6 * max_pair

    residual = phi - weights @ faces
    dffs = np.linalg.norm(residual, axis=1)
    theta_dffs = float(dffs.mean() + 3.0 * dffs.std())

    return FaceModel(width=w, height=h, n_train=n, k=k_eff,
                     mean_face=mean,
                     eigenvalues=eigenvalues[:k_eff].copy(),
                     eigenfaces=faces,
                     class_centers=centers,
                     theta_face=theta_face,
                     theta_dffs=theta_dffs)


def _as_vector(pixels, model: FaceModel) -> np.ndarray:
    # bytes and integer arrays hold 0..255 levels; float arrays are already
    # scaled to [0, 1]
    d = model.width * model.height
    if isinstance(pixels, (bytes, bytearray)):
        if len(pixels) != d:
            raise DimensionMismatch(f"{len(pixels)} bytes, model wants {d}")
        return np.frombuffer(pixels, dtype=np.uint8).astype(float) / 255.0
    arr = np.asarray(pixels)
    if arr.size != d:
        raise DimensionMismatch(f"{arr.size} values, model wants {d}")
    if np.issubdtype(arr.dtype, np.floating):
        return arr.astype(float).reshape(-1)
    return arr.astype(float).reshape(-1) / 255.0


def project(pixels, model: FaceModel) -> np.ndarray:
    """Weights of an image in face space: U (x - mean)."""
    return model.eigenfaces @ (_as_vector(pixels, model) - model.mean_face)


def classify(weights: np.ndarray, model: FaceModel) -> tuple[str | None, float]:
    """Nearest class center; None (UNKNOWN) beyond theta_face.

    Equidistant centers resolve to the lexicographically smaller label.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (model.k,):
        raise DimensionMismatch(f"weights {weights.shape}, model k={model.k}")
    best_label, best_dist = min(
        ((label, float(np.linalg.norm(weights - center)))
         for label, center in model.class_centers.items()),
        key=lambda item: (item[1], item[0]))
    if best_dist > model.theta_face:
        return UNKNOWN, best_dist
    return best_label, best_dist


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def _box_filter_matrix(out_len: int, box: float, src_len: int) -> np.ndarray:
    """Area-averaging operator: out cell i covers source span [i*box, (i+1)*box)."""
    m = np.zeros((out_len, src_len))
    for i in range(out_len):
        lo = i * box
        hi = (i + 1) * box
        r0 = int(math.floor(lo))
        r1 = min(src_len, int(math.ceil(hi)))
        for r in range(r0, r1):
            m[i, r] = max(0.0, min(hi, r + 1) - max(lo, r)) / box
    return m


def area_downscale(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize by exact fractional area averaging."""
    src_h, src_w = arr.shape
    rh = _box_filter_matrix(out_h, src_h / out_h, src_h)
    rw = _box_filter_matrix(out_w, src_w / out_w, src_w)
    return rh @ arr @ rw.T


def _iou(a: DetectedBox, b: DetectedBox) -> float:
    ix = max(0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union else 0.0


def _frame_array(frame: FramePayload) -> np.ndarray:
    return (np.frombuffer(frame.pixels, dtype=np.uint8)
            .reshape(frame.height, frame.width).astype(float) / 255.0)


def detect(frame: FramePayload, model: FaceModel, stride: int | None = None,
           scales: tuple[float, ...] = DEFAULT_SCALES) -> list[DetectedBox]:
    """Find face-like regions by thresholded distance from face space.

    A window of (model w x h) times each scale slides at the given stride
    (default model width / 4); every window is area-averaged down to model
    size, projected, and kept as a candidate when its DFFS is at or below
    the model's detection threshold.  Greedy NMS then drops any candidate
    overlapping a better (lower DFFS) kept box with IoU > 0.3.
    """
    if stride is None:
        stride = max(1, model.width // 4)
    mh, mw = model.height, model.width
    arr = _frame_array(frame)
    fh, fw = arr.shape
    smallest = min(scales)
    if fh < mh * smallest or fw < mw * smallest:
        raise FrameTooSmall(
            f"{fw}x{fh} frame cannot hold a {mw}x{mh} window at scale {smallest}")

    u = model.eigenfaces
    mean = model.mean_face
    candidates: list[DetectedBox] = []
    for scale in scales:
        grid_h = int(fh / scale)
        grid_w = int(fw / scale)
        if grid_h < mh or grid_w < mw:
            continue
        if scale == 1.0:
            small = arr
        else:
            rh = _box_filter_matrix(grid_h, scale, fh)
            rw = _box_filter_matrix(grid_w, scale, fw)
            small = rh @ arr @ rw.T
        step = max(1, round(stride / scale))
        wins = sliding_window_view(small, (mh, mw))[::step, ::step]
        ny, nx = wins.shape[:2]
        flat = wins.reshape(ny * nx, mh * mw) - mean
        w = flat @ u.T
        dffs_sq = np.einsum("ij,ij->i", flat, flat) - np.einsum("ij,ij->i", w, w)
        dffs = np.sqrt(np.clip(dffs_sq, 0.0, None))
        hit = np.nonzero(dffs <= model.theta_dffs)[0]
        for flat_idx in hit:
            gy, gx = divmod(int(flat_idx), nx)
            candidates.append(DetectedBox(
                x=round(gx * step * scale), y=round(gy * step * scale),
                w=round(mw * scale), h=round(mh * scale),
                dffs=float(dffs[flat_idx])))

    candidates.sort(key=lambda b: (b.dffs, b.y, b.x, b.w))
    kept: list[DetectedBox] = []
    for cand in candidates:
        if all(_iou(cand, k) <= NMS_IOU_THRESHOLD for k in kept):
            kept.append(cand)
    return kept


def recognize_frame(frame: FramePayload, model: FaceModel,
                    stride: int | None = None,
                    scales: tuple[float, ...] = DEFAULT_SCALES,
                    measure_time: bool = True) -> RecognitionResult:
    """Detect, project, and classify every face-like box in one pass.

    measure_time=False reports 0.0 ms instead of wall time; virtual-clock
    runs use it so transcripts stay bit-reproducible.
    """
    t0 = time.perf_counter()
    boxes = detect(frame, model, stride=stride, scales=scales)
    arr = _frame_array(frame)
    results = []
    for box in boxes:
        patch = arr[box.y:box.y + box.h, box.x:box.x + box.w]
        small = area_downscale(patch, model.height, model.width)
        label, dist = classify(project(small, model), model)
        results.append(ResultBox(box.x, box.y, box.w, box.h, label, dist))
    elapsed_ms = (time.perf_counter() - t0) * 1000.0 if measure_time else 0.0
    return RecognitionResult(frame.frame_seq, elapsed_ms, tuple(results))


# ---------------------------------------------------------------------------
# Model serialization: magic EFM1, then big-endian fields
# ---------------------------------------------------------------------------

def model_to_bytes(model: FaceModel) -> bytes:
    out = bytearray()
    out += MODEL_MAGIC
    out += struct.pack(">HHII", model.width, model.height, model.n_train, model.k)
    out += model.mean_face.astype(">f8").tobytes()
    out += model.eigenvalues.astype(">f8").tobytes()
    out += model.eigenfaces.astype(">f8").tobytes()
    out += struct.pack(">I", len(model.class_centers))
    for label in sorted(model.class_centers):
        raw = label.encode("utf-8")
        out += struct.pack(">H", len(raw)) + raw
        out += model.class_centers[label].astype(">f8").tobytes()
    out += struct.pack(">dd", model.theta_face, model.theta_dffs)
    return bytes(out)


def model_from_bytes(data: bytes) -> FaceModel:
    if data[:4] != MODEL_MAGIC:
        raise FaceRecError(f"bad model magic {data[:4]!r}")
    w, h, n, k = struct.unpack_from(">HHII", data, 4)
    d = w * h
    pos = 4 + 12
    mean = np.frombuffer(data, dtype=">f8", count=d, offset=pos).astype(float)
    pos += 8 * d
    eigenvalues = np.frombuffer(data, dtype=">f8", count=k, offset=pos).astype(float)
    pos += 8 * k
    faces = np.frombuffer(data, dtype=">f8", count=k * d, offset=pos) \
        .astype(float).reshape(k, d)
    pos += 8 * k * d
    (n_classes,) = struct.unpack_from(">I", data, pos)
    pos += 4
    centers: dict[str, np.ndarray] = {}
    for _ in range(n_classes):
        (label_len,) = struct.unpack_from(">H", data, pos)
        pos += 2
        label = data[pos:pos + label_len].decode("utf-8")
        pos += label_len
        centers[label] = np.frombuffer(data, dtype=">f8", count=k,
                                       offset=pos).astype(float)
        pos += 8 * k
    theta_face, theta_dffs = struct.unpack_from(">dd", data, pos)
    return FaceModel(w, h, n, k, mean, eigenvalues, faces, centers,
                     theta_face, theta_dffs)


def save_model(model: FaceModel, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path: str) -> FaceModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# Gallery io and the synthetic gallery generator
# ---------------------------------------------------------------------------

def load_gallery(gallery_dir: str) -> list[GalleryImage]:
    """Read <gallery_dir>/<label>/<name>.pgm into a sorted gallery."""
    import os

    from .pgm import read_pgm

    gallery: list[GalleryImage] = []
    for label in sorted(os.listdir(gallery_dir)):
        sub = os.path.join(gallery_dir, label)
        if not os.path.isdir(sub):
            continue
        for name in sorted(os.listdir(sub)):
            if not name.endswith(".pgm"):
                continue
            img = read_pgm(os.path.join(sub, name))
            gallery.append(GalleryImage(label, img.width, img.height, img.pixels))
    if not gallery:
        raise GalleryTooSmall(f"no PGM images under {gallery_dir}")
    return gallery


def save_gallery(gallery: list[GalleryImage], out_dir: str) -> None:
    import os
    from collections import defaultdict

    from .pgm import write_pgm

    counters: dict[str, int] = defaultdict(int)
    for img in gallery:
        sub = os.path.join(out_dir, img.label)
        os.makedirs(sub, exist_ok=True)
        idx = counters[img.label]
        counters[img.label] += 1
        write_pgm(GrayImage(img.width, img.height, img.pixels),
                  os.path.join(sub, f"{idx:03d}.pgm"))


def identity_base(seed: int, identity: int, width: int, height: int) -> np.ndarray:
    """Procedural per-identity face stand-in: a smooth random 4x4 field."""
    rng = np.random.default_rng([seed, identity])
    coarse = rng.uniform(30.0, 225.0, size=(4, 4))
    ys = np.linspace(0.0, 3.0, height)
    xs = np.linspace(0.0, 3.0, width)
    rows = np.empty((4, width))
    for r in range(4):
        rows[r] = np.interp(xs, np.arange(4), coarse[r])
    out = np.empty((height, width))
    for c in range(width):
        out[:, c] = np.interp(ys, np.arange(4), rows[:, c])
    return out


def synthetic_image(seed: int, identity: int, sample: int, width: int,
                    height: int, noise_sigma: float = 8.0) -> np.ndarray:
    base = identity_base(seed, identity, width, height)
    rng = np.random.default_rng([seed, identity, sample])
    noisy = base + rng.normal(0.0, noise_sigma, size=base.shape)
    return np.clip(noisy, 0.0, 255.0)


def make_synthetic_gallery(identities: int = 10, per_identity: int = 5,
                           width: int = 32, height: int = 32, seed: int = 42,
                           noise_sigma: float = 8.0) -> list[GalleryImage]:
    gallery = []
    for i in range(identities):
        label = f"id{i:02d}"
        for j in range(per_identity):
            img = synthetic_image(seed, i, j, width, height, noise_sigma)
            gallery.append(GalleryImage(label, width, height,
                                        img.astype(np.uint8).tobytes()))
    return gallery


def make_probe(seed: int, identity: int, probe_index: int, width: int = 32,
               height: int = 32, noise_sigma: float = 8.0) -> bytes:
    """Fresh noisy sample of an identity, disjoint from gallery noise draws."""
    img = synthetic_image(seed, identity, 10_000 + probe_index, width, height,
                          noise_sigma)
    return img.astype(np.uint8).tobytes()


def make_two_face_frame(gallery: list[GalleryImage],
                        labels: tuple[str, str] = ("id00", "id01"),
                        offsets: tuple[tuple[int, int], ...] = ((8, 8), (56, 24)),
                        frame_w: int = 96, frame_h: int = 64,
                        frame_seq: int = 0) -> tuple[FramePayload, list]:
    """Two gallery faces pasted on black; returns the frame and truth boxes."""
    canvas = np.zeros((frame_h, frame_w), dtype=np.uint8)
    truth = []
    for label, (x, y) in zip(labels, offsets):
        img = next(g for g in gallery if g.label == label)
        pix = np.frombuffer(img.pixels, dtype=np.uint8).reshape(img.height,
                                                                img.width)
        canvas[y:y + img.height, x:x + img.width] = pix
        truth.append((label, x, y, img.width, img.height))
    frame = FramePayload(frame_seq, 0, frame_w, frame_h, canvas.tobytes())
    return frame, truth


# ---------------------------------------------------------------------------
# Wire payload codec for recognition results
# ---------------------------------------------------------------------------

def pack_recog_result(result: RecognitionResult) -> bytes:
    out = bytearray(struct.pack(">IdH", result.frame_seq,
                                result.processing_time_ms, len(result.boxes)))
    for box in result.boxes:
        label = (box.label or "").encode("utf-8")
        out += struct.pack(">HHHHB", box.x, box.y, box.w, box.h,
                           0 if box.label is None else 1)
        out += struct.pack(">H", len(label)) + label
        out += struct.pack(">d", box.distance)
    return bytes(out)


def unpack_recog_result(payload: bytes) -> RecognitionResult:
    frame_seq, elapsed, n = struct.unpack_from(">IdH", payload)
    pos = 14
    boxes = []
    for _ in range(n):
        x, y, w, h, known = struct.unpack_from(">HHHHB", payload, pos)
        pos += 9
        (label_len,) = struct.unpack_from(">H", payload, pos)
        pos += 2
        label = payload[pos:pos + label_len].decode("utf-8") if known else None
        pos += label_len
        (dist,) = struct.unpack_from(">d", payload, pos)
        pos += 8
        boxes.append(ResultBox(x, y, w, h, label, dist))
    return RecognitionResult(frame_seq, elapsed, tuple(boxes))
