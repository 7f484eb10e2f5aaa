"""Eigenface tests: hand-worked anchors, full-covariance oracle, detection."""

import numpy as np
import pytest

from edgeframe import facerec as fr
from edgeframe.facerec import (
    DimensionMismatch,
    FrameTooSmall,
    GalleryImage,
    GalleryTooSmall,
    InsufficientVariance,
    classify,
    detect,
    jacobi_eigh,
    project,
    recognize_frame,
    train,
)
from edgeframe.wire import FramePayload


def as_float(img: GalleryImage) -> np.ndarray:
    return np.frombuffer(img.pixels, dtype=np.uint8).astype(float) / 255.0


def full_covariance_oracle(gallery):
    """Brute-force reference: eigendecompose the d x d scatter directly."""
    x = np.vstack([as_float(img) for img in gallery])
    phi = x - x.mean(axis=0)
    scatter = phi.T @ phi
    evals, evecs = np.linalg.eigh(scatter)
    return evals[::-1], evecs[:, ::-1]


# ---------------------------------------------------------------------------
# Jacobi eigensolver
# ---------------------------------------------------------------------------

def test_jacobi_matches_numpy_on_random_symmetric():
    rng = np.random.default_rng(1)
    for n in (2, 3, 7, 15, 40):
        x = rng.standard_normal((n, n))
        sym = (x + x.T) / 2.0
        evals, evecs = jacobi_eigh(sym)
        ref = np.linalg.eigvalsh(sym)[::-1]
        assert np.abs(evals - ref).max() < 1e-10
        assert np.abs(evecs.T @ evecs - np.eye(n)).max() < 1e-10
        assert np.abs(evecs @ np.diag(evals) @ evecs.T - sym).max() < 1e-8


def test_jacobi_is_deterministic():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((12, 12))
    sym = x + x.T
    e1, v1 = jacobi_eigh(sym)
    e2, v2 = jacobi_eigh(sym)
    assert np.array_equal(e1, e2) and np.array_equal(v1, v2)


# ---------------------------------------------------------------------------
# Training: the 2x2 two-image example, worked by hand
# ---------------------------------------------------------------------------

def two_image_gallery():
    return [GalleryImage("dark", 2, 2, bytes([0, 0, 0, 0])),
            GalleryImage("light", 2, 2, bytes([255, 255, 255, 255]))]


def test_two_image_hand_example():
    model = train(two_image_gallery(), k=5)
    assert model.k == 1  # lambda = {2, 0}; the zero mode is dropped
    assert np.allclose(model.mean_face, [0.5, 0.5, 0.5, 0.5])
    assert np.allclose(model.eigenvalues, [2.0])
    assert np.allclose(model.eigenfaces, [[0.5, 0.5, 0.5, 0.5]])
    w_dark = project(bytes([0, 0, 0, 0]), model)
    w_light = project(bytes([255, 255, 255, 255]), model)
    assert np.allclose(w_dark, [-1.0])
    assert np.allclose(w_light, [+1.0])


def test_project_mean_is_zero_and_basis_response():
    model = train(two_image_gallery(), k=1)
    assert np.allclose(project(model.mean_face, model), [0.0], atol=1e-12)
    # an image shifted along eigenface i responds only on component i
    shifted = model.mean_face + 0.25 * model.eigenfaces[0]
    assert np.allclose(project(shifted, model), [0.25], atol=1e-12)


def test_train_rejections():
    with pytest.raises(GalleryTooSmall):
        train([GalleryImage("a", 2, 2, bytes(4))], k=1)
    with pytest.raises(GalleryTooSmall):
        train([GalleryImage("a", 2, 2, bytes(4)),
               GalleryImage("a", 2, 2, bytes(4))], k=1)
    with pytest.raises(InsufficientVariance):
        train([GalleryImage("a", 2, 2, bytes([9] * 4)),
               GalleryImage("b", 2, 2, bytes([9] * 4)),
               GalleryImage("c", 2, 2, bytes([9] * 4))], k=1)
    with pytest.raises(DimensionMismatch):
        train([GalleryImage("a", 2, 2, bytes(4)),
               GalleryImage("b", 2, 3, bytes(6))], k=1)
    with pytest.raises(ValueError):
        train(two_image_gallery(), k=0)


# ---------------------------------------------------------------------------
# Covariance-trick vs direct d x d oracle
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_trick_matches_full_covariance_oracle(seed):
    rng = np.random.default_rng(seed)
    n_ids = int(rng.integers(2, 6))
    per = int(rng.integers(2, 5))
    side = int(rng.choice([16, 24, 32]))
    gallery = fr.make_synthetic_gallery(identities=n_ids, per_identity=per,
                                        width=side, height=side, seed=seed)
    assert len(gallery) <= 20
    model = train(gallery, k=len(gallery))
    ref_evals, ref_evecs = full_covariance_oracle(gallery)

    lam_max = model.eigenvalues[0]
    assert np.abs(model.eigenvalues - ref_evals[:model.k]).max() <= 1e-6 * lam_max

    # eigenfaces equal the oracle's eigenvectors up to sign
    for i in range(model.k):
        ours = model.eigenfaces[i]
        theirs = ref_evecs[:, i]
        align = np.sign(ours @ theirs)
        assert np.abs(ours - align * theirs).max() < 1e-6

    gram = model.eigenfaces @ model.eigenfaces.T
    assert np.abs(gram - np.eye(model.k)).max() <= 1e-6


def test_orthonormality_on_standard_gallery(standard_model):
    gram = standard_model.eigenfaces @ standard_model.eigenfaces.T
    assert np.abs(gram - np.eye(standard_model.k)).max() <= 1e-6


def test_reconstruction_error_non_increasing_in_k(standard_gallery):
    x = np.vstack([as_float(img) for img in standard_gallery])
    errors = []
    for k in (1, 2, 5, 10, 25, len(standard_gallery) - 1):
        model = train(standard_gallery, k=k)
        phi = x - model.mean_face
        resid = phi - (phi @ model.eigenfaces.T) @ model.eigenfaces
        errors.append(np.linalg.norm(resid, axis=1).mean())
    assert all(a >= b - 1e-12 for a, b in zip(errors, errors[1:]))
    assert errors[-1] <= 1e-6  # every difference vector lies in the span at N-1


def test_projection_is_linear(standard_model):
    rng = np.random.default_rng(3)
    g1 = rng.random(32 * 32)
    g2 = rng.random(32 * 32)
    for a in (0.0, 0.25, 0.8, 1.0):
        mix = project(a * g1 + (1 - a) * g2, standard_model)
        parts = a * project(g1, standard_model) + (1 - a) * project(g2, standard_model)
        assert np.abs(mix - parts).max() <= 1e-9


def test_training_is_bit_deterministic(standard_gallery):
    b1 = fr.model_to_bytes(train(standard_gallery, k=10))
    b2 = fr.model_to_bytes(train(standard_gallery, k=10))
    assert b1 == b2


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

def test_classify_at_center_and_threshold(standard_model):
    label = sorted(standard_model.class_centers)[0]
    center = standard_model.class_centers[label]
    assert classify(center, standard_model) == (label, 0.0)

    # nudge every center away by more than theta: must reject
    far = min(standard_model.class_centers.values(), key=lambda c: np.linalg.norm(c))
    direction = np.ones(standard_model.k) / np.sqrt(standard_model.k)
    outlier = far + direction * (standard_model.theta_face * 50)
    got, dist = classify(outlier, standard_model)
    assert got is fr.UNKNOWN
    assert dist > standard_model.theta_face


def test_classify_tie_breaks_to_smaller_label():
    gallery = two_image_gallery()
    model = train(gallery, k=1)
    midpoint = (model.class_centers["dark"] + model.class_centers["light"]) / 2
    label, _ = classify(midpoint, model)
    assert label == "dark"


def test_all_gallery_images_rank1_correct(standard_gallery, standard_model):
    for img in standard_gallery:
        weights = project(img.pixels, standard_model)
        distances = {lab: float(np.linalg.norm(weights - c))
                     for lab, c in standard_model.class_centers.items()}
        assert min(distances, key=distances.get) == img.label


def test_probe_rank1_accuracy(standard_model):
    hits = 0
    total = 0
    for identity in range(10):
        for probe_idx in range(5):
            pixels = fr.make_probe(42, identity, probe_idx)
            label, _ = classify(project(pixels, standard_model), standard_model)
            hits += label == f"id{identity:02d}"
            total += 1
    assert hits / total >= 0.9


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def test_gallery_image_as_frame_has_near_zero_dffs():
    gallery = fr.make_synthetic_gallery(identities=4, per_identity=1, seed=3)
    model = train(gallery, k=len(gallery) - 1)  # k = N-1: differences in span
    img = gallery[0]
    frame = FramePayload(0, 0, img.width, img.height, img.pixels)
    boxes = detect(frame, model)
    assert len(boxes) == 1
    box = boxes[0]
    assert (box.x, box.y, box.w, box.h) == (0, 0, img.width, img.height)
    assert box.dffs <= 1e-6


def test_two_face_fixture_found_at_true_offsets(standard_gallery, standard_model):
    frame, truth = fr.make_two_face_frame(standard_gallery)
    boxes = detect(frame, standard_model)
    assert len(boxes) == 2
    stride = standard_model.width // 4
    for _, tx, ty, tw, th in truth:
        matches = [b for b in boxes
                   if abs(b.x - tx) <= 2 * stride and abs(b.y - ty) <= 2 * stride]
        assert len(matches) == 1


def test_uniform_noise_frames_yield_no_boxes(standard_model):
    rejected = 0
    for seed in range(100):
        rng = np.random.default_rng([4242, seed])
        pixels = rng.integers(0, 256, size=64 * 96, dtype=np.uint8).tobytes()
        frame = FramePayload(seed, 0, 96, 64, pixels)
        rejected += len(detect(frame, standard_model)) == 0
    assert rejected >= 99


def test_frame_too_small(standard_model):
    with pytest.raises(FrameTooSmall):
        detect(FramePayload(0, 0, 8, 8, bytes(64)), standard_model)


def test_area_downscale_matches_block_mean():
    arr = np.arange(64, dtype=float).reshape(8, 8)
    halved = fr.area_downscale(arr, 4, 4)
    expected = arr.reshape(4, 2, 4, 2).mean(axis=(1, 3))
    assert np.allclose(halved, expected)
    # fractional ratio preserves the overall mean (weights sum to 1)
    frac = fr.area_downscale(arr[:6, :6], 4, 4)
    assert frac.shape == (4, 4)
    assert frac.mean() == pytest.approx(arr[:6, :6].mean())


def test_recognize_frame_end_to_end(standard_gallery, standard_model):
    frame, truth = fr.make_two_face_frame(standard_gallery)
    result = recognize_frame(frame, standard_model)
    assert result.frame_seq == frame.frame_seq
    got = sorted((b.label, b.x, b.y) for b in result.boxes)
    want = sorted((lab, x, y) for lab, x, y, _, _ in truth)
    assert [g[0] for g in got] == [w[0] for w in want]
    assert result.processing_time_ms > 0.0

    flat = FramePayload(1, 0, 96, 64, bytes(96 * 64))
    empty = recognize_frame(flat, standard_model)
    assert empty.boxes == ()

    single = standard_gallery[5]  # a "bob"-style full-frame training image
    one = recognize_frame(FramePayload(2, 0, 32, 32, single.pixels), standard_model)
    assert len(one.boxes) == 1
    assert one.boxes[0].label == single.label

    timeless = recognize_frame(frame, standard_model, measure_time=False)
    assert timeless.processing_time_ms == 0.0


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def test_model_round_trip(tmp_path, standard_model):
    path = tmp_path / "faces.efm"
    fr.save_model(standard_model, str(path))
    loaded = fr.load_model(str(path))
    assert loaded.width == standard_model.width
    assert loaded.n_train == standard_model.n_train
    assert loaded.k == standard_model.k
    assert np.array_equal(loaded.mean_face, standard_model.mean_face)
    assert np.array_equal(loaded.eigenvalues, standard_model.eigenvalues)
    assert np.array_equal(loaded.eigenfaces, standard_model.eigenfaces)
    assert loaded.theta_face == standard_model.theta_face
    assert loaded.theta_dffs == standard_model.theta_dffs
    for label, center in standard_model.class_centers.items():
        assert np.array_equal(loaded.class_centers[label], center)
    head = path.read_bytes()[:4]
    assert head == b"EFM1"


def test_gallery_dir_round_trip(tmp_path, standard_gallery):
    fr.save_gallery(standard_gallery, str(tmp_path))
    loaded = fr.load_gallery(str(tmp_path))
    assert sorted((g.label, g.pixels) for g in loaded) == \
        sorted((g.label, g.pixels) for g in standard_gallery)


def test_recog_result_codec_round_trip():
    result = fr.RecognitionResult(9, 12.5, (
        fr.ResultBox(1, 2, 32, 32, "alice", 0.75),
        fr.ResultBox(40, 8, 48, 48, None, 9.25),
    ))
    assert fr.unpack_recog_result(fr.pack_recog_result(result)) == result
