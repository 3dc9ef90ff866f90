"""Synthetic tri-modal dataset driven by a shared concept vector.

Every sample in the corpus is a deterministic render of an 8-factor
concept drawn uniformly from [-1, 1]^8, so cross-modal ground truth is
exact: an image, an audio clip, and a token string made from the same
concept are a matched triple by construction.

Renders:
  image  16x16 grid  = clip(tanh(W c + b) + Gaussian bump at (c0, c1), -1, 1)
  audio  64 samples  = sum of 4 sinusoids with frequency/amplitude/phase
                       affine in c, scaled by the amplitude budget so the
                       signal stays inside [-1, 1]
  text   12 tokens   = BOS, 8 attribute tokens (one per factor, 4 bins
                       each, edges map to the lower bin), EOS, 2 PAD

Both continuous renders are near-isometries: mixing weights are
orthogonal (Gram-Schmidt columns for image, Hadamard rows for audio)
and nonlinear effects are kept small, so payload distance tracks
concept distance and brute-force retrieval agrees with the concept
nearest neighbor.

Rendering constants come from a fixed Philox key published below; the
same concept always renders to bit-identical payloads.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import philox

N_FACTORS = 8
N_BINS = 4
IMAGE_SHAPE = (16, 16)
AUDIO_LEN = 64
TEXT_LEN = 12
VOCAB_SIZE = 32

BOS, EOS, PAD, EMPTY = 0, 1, 2, 3
ATTR_TOKEN_BASE = 4
N_ATTR_TOKENS = VOCAB_SIZE - ATTR_TOKEN_BASE  # 28

MODALITIES = ("image", "audio", "text")
SPLITS = ("train-unimodal", "train-paired", "test")

# Key for all fixed rendering constants. Streams: 1 image, 2 audio,
# 3 text-embedding table.
RENDER_KEY = 0x7C3D_0001

BUMP_AMP = 0.01
BUMP_SIGMA = 1.2
IMAGE_GAIN = 1.0


def _orthonormal_columns(m: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt. Plain loops, so the result depends only on
    the input bytes, not on which LAPACK the host wheels ship."""
    q = m.astype(np.float64).copy()
    for j in range(q.shape[1]):
        for i in range(j):
            q[:, j] -= (q[:, i] @ q[:, j]) * q[:, i]
        q[:, j] /= np.sqrt(q[:, j] @ q[:, j])
    return q


def _image_constants():
    rng = philox(RENDER_KEY, 1)
    w = _orthonormal_columns(
        rng.standard_normal(size=(IMAGE_SHAPE[0] * IMAGE_SHAPE[1], N_FACTORS))
    )
    # Orthonormal columns keep payload distance proportional to concept
    # distance; the gain trades range coverage against tanh saturation.
    w *= IMAGE_GAIN
    b = rng.uniform(-0.1, 0.1, size=(IMAGE_SHAPE[0] * IMAGE_SHAPE[1],))
    return w, b.astype(np.float64)


def _hadamard8() -> np.ndarray:
    h = np.array([[1.0]])
    for _ in range(3):
        h = np.block([[h, h], [h, -h]])
    return h


def _audio_constants():
    # Phase and frequency rows split a Hadamard basis, so the eight
    # affine forms are mutually orthogonal and jointly identify the
    # concept; L1 row normalization bounds each form by |c|_inf <= 1.
    h = _hadamard8() / float(N_FACTORS)
    wp = h[:4]
    wf = h[4:]
    wa = h[:4]
    base_freq = np.array([4.0, 12.0, 20.0, 28.0])
    return base_freq, wf, wa, wp


_IMG_W, _IMG_B = _image_constants()
_AUD_F0, _AUD_WF, _AUD_WA, _AUD_WP = _audio_constants()

AMP_BASE = 0.5
# Amplitude span is the degenerate affine choice: nonzero spans modulate
# the phase-channel distance weights and break the waveform-vs-concept
# nearest-neighbor correspondence the retrieval oracle depends on.
AMP_SPAN = 0.0
PHASE_SPAN = 0.08
# Frequency offsets in cycles per window, weighted so a unit of the
# frequency form moves the waveform as far as a unit of the phase form.
FREQ_SPAN = np.sqrt(12.0) * PHASE_SPAN / (2.0 * np.pi)
# Worst-case peak: all four components aligned at max amplitude.
AUDIO_NORM = 4.0 * (AMP_BASE + AMP_SPAN)


def _text_embed_table():
    """Fixed 32 x 4 token embedding grid for text-as-continuous-latent.

    Streams of the render key are scanned once for a well-separated
    point set; the scan is deterministic, so the table is a constant.
    """
    best, best_d = None, -1.0
    for s in range(64):
        tab = philox(RENDER_KEY, 3 + s).uniform(-1.0, 1.0, size=(VOCAB_SIZE, 4))
        d = np.linalg.norm(tab[:, None, :] - tab[None, :, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        m = d.min()
        if m > best_d:
            best, best_d = tab, m
        if m >= 0.55:
            break
    return best.astype(np.float32)


TEXT_EMBED_TABLE = _text_embed_table()


@dataclass
class ModalitySample:
    modality: str
    payload: np.ndarray
    concept_id: int = -1

    def copy(self) -> "ModalitySample":
        return ModalitySample(self.modality, self.payload.copy(), self.concept_id)


def sample_concept(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(N_FACTORS,)).astype(np.float64)


def render_image(c: np.ndarray, concept_id: int = -1) -> ModalitySample:
    c = np.asarray(c, dtype=np.float64)
    base = np.tanh(_IMG_W @ c + _IMG_B).reshape(IMAGE_SHAPE)
    # Bump center: factors 0 and 1 mapped from [-1, 1] onto the pixel grid.
    gx = (c[0] + 1.0) / 2.0 * (IMAGE_SHAPE[1] - 1)
    gy = (c[1] + 1.0) / 2.0 * (IMAGE_SHAPE[0] - 1)
    rows = np.arange(IMAGE_SHAPE[0])[:, None]
    cols = np.arange(IMAGE_SHAPE[1])[None, :]
    bump = BUMP_AMP * np.exp(-((cols - gx) ** 2 + (rows - gy) ** 2) / (2.0 * BUMP_SIGMA ** 2))
    out = np.clip(base + bump, -1.0, 1.0).astype(np.float32)
    return ModalitySample("image", out, concept_id)


def render_audio(c: np.ndarray, concept_id: int = -1) -> ModalitySample:
    c = np.asarray(c, dtype=np.float64)
    # Phase is referenced at the window center: a frequency offset then
    # sweeps phase antisymmetrically, which keeps the frequency and phase
    # contributions to waveform distance orthogonal.
    t = (np.arange(AUDIO_LEN) - (AUDIO_LEN - 1) / 2.0) / AUDIO_LEN
    freqs = _AUD_F0 + FREQ_SPAN * (_AUD_WF @ c)
    amps = AMP_BASE + AMP_SPAN * (_AUD_WA @ c)
    phases = PHASE_SPAN * (_AUD_WP @ c)
    sig = np.zeros(AUDIO_LEN, dtype=np.float64)
    for k in range(4):
        sig += amps[k] * np.sin(2.0 * np.pi * freqs[k] * t + phases[k])
    sig /= AUDIO_NORM
    return ModalitySample("audio", sig.astype(np.float32), concept_id)


def quantize_factor(v) -> np.ndarray:
    """Factor value(s) -> bin index 0..3; bin edges map to the lower bin."""
    return np.digitize(np.asarray(v, dtype=np.float64), [-0.5, 0.0, 0.5], right=True)


def attribute_token(factor: int, bin_index: int) -> int:
    return ATTR_TOKEN_BASE + (N_BINS * factor + int(bin_index)) % N_ATTR_TOKENS


def render_text(c: np.ndarray, concept_id: int = -1) -> ModalitySample:
    c = np.asarray(c, dtype=np.float64)
    bins = quantize_factor(c)
    toks = [BOS] + [attribute_token(k, bins[k]) for k in range(N_FACTORS)] + [EOS]
    toks += [PAD] * (TEXT_LEN - len(toks))
    return ModalitySample("text", np.asarray(toks, dtype=np.int32), concept_id)


RENDERERS = {"image": render_image, "audio": render_audio, "text": render_text}


@dataclass
class Dataset:
    concepts: np.ndarray                      # (n, 8) float64
    splits: list[str]                         # per-concept split tag
    samples: dict[str, list[ModalitySample]]  # modality -> per-concept sample
    seed: int
    counts: dict[str, int] = field(default_factory=dict)

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split '{split}'; expected one of {SPLITS}")
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.concepts).tobytes())
        h.update(json.dumps(self.splits).encode())
        for m in MODALITIES:
            for s in self.samples[m]:
                h.update(np.ascontiguousarray(s.payload).tobytes())
        return h.hexdigest()


def build_dataset(n_unimodal: int, n_paired: int, n_test: int, seed: int) -> Dataset:
    """Draw disjoint concept splits and render all three modalities for each.

    Splits are disjoint by concept index: the first n_unimodal concepts
    form train-unimodal, the next n_paired train-paired, the rest test.
    Regeneration from the same arguments is bit-exact.
    """
    for name, n in (("n_unimodal", n_unimodal), ("n_paired", n_paired), ("n_test", n_test)):
        if n <= 0:
            raise ValueError(f"{name} must be positive, got {n}")
    if n_unimodal < n_paired:
        raise ValueError(f"n_unimodal ({n_unimodal}) must be >= n_paired ({n_paired})")
    rng = philox(seed, 0)
    total = n_unimodal + n_paired + n_test
    concepts = np.stack([sample_concept(rng) for _ in range(total)])
    splits = (["train-unimodal"] * n_unimodal + ["train-paired"] * n_paired
              + ["test"] * n_test)
    samples = {m: [RENDERERS[m](concepts[i], i) for i in range(total)] for m in MODALITIES}
    return Dataset(concepts=concepts, splits=splits, samples=samples, seed=seed,
                   counts={"n_unimodal": n_unimodal, "n_paired": n_paired, "n_test": n_test})


_DTYPE_TAGS = {"image": "<f4", "audio": "<f4", "text": "<i4"}
_SHAPES = {"image": list(IMAGE_SHAPE), "audio": [AUDIO_LEN], "text": [TEXT_LEN]}


def save_dataset(ds: Dataset, out_dir) -> None:
    """Write meta.json, concepts.bin, manifest.jsonl and per-modality payload files.

    Payloads are raw little-endian arrays packed per modality in concept
    order; each manifest line records the byte window of one sample.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "concepts.bin").write_bytes(
        np.ascontiguousarray(ds.concepts.astype("<f8")).tobytes())
    lines = []
    for m in MODALITIES:
        tag = _DTYPE_TAGS[m]
        blob = bytearray()
        for i, s in enumerate(ds.samples[m]):
            raw = np.ascontiguousarray(s.payload.astype(tag)).tobytes()
            lines.append(json.dumps({
                "sample_id": f"{m}-{i:06d}", "concept_id": i, "modality": m,
                "split": ds.splits[i], "file": f"{m}.bin", "offset": len(blob),
                "nbytes": len(raw), "dtype": tag, "shape": _SHAPES[m],
            }, sort_keys=True))
            blob.extend(raw)
        (out / f"{m}.bin").write_bytes(bytes(blob))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {"format_version": 1, "seed": ds.seed, "counts": ds.counts,
            "n_concepts": len(ds.splits), "digest": ds.digest()}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def load_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    if not src.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {src}")
    meta = json.loads((src / "meta.json").read_text(encoding="utf-8"))
    if meta.get("format_version") != 1:
        raise ValueError(f"unsupported dataset format_version {meta.get('format_version')}")
    n = meta["n_concepts"]
    concepts = np.frombuffer((src / "concepts.bin").read_bytes(), dtype="<f8").reshape(n, N_FACTORS)
    concepts = concepts.astype(np.float64)
    blobs = {m: (src / f"{m}.bin").read_bytes() for m in MODALITIES}
    samples: dict[str, list] = {m: [None] * n for m in MODALITIES}
    splits: list[str | None] = [None] * n
    with (src / "manifest.jsonl").open(encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            m, i = rec["modality"], rec["concept_id"]
            raw = blobs[m][rec["offset"]:rec["offset"] + rec["nbytes"]]
            arr = np.frombuffer(raw, dtype=rec["dtype"]).reshape(rec["shape"])
            native = arr.astype(np.float32 if m != "text" else np.int32)
            samples[m][i] = ModalitySample(m, native, i)
            splits[i] = rec["split"]
    if any(s is None for s in splits) or any(x is None for col in samples.values() for x in col):
        raise ValueError("manifest incomplete: some samples missing")
    ds = Dataset(concepts=concepts, splits=list(splits), samples=samples,
                 seed=meta["seed"], counts=dict(meta["counts"]))
    if ds.digest() != meta["digest"]:
        raise ValueError("dataset digest mismatch after load")
    return ds


def concept_bins(concepts: np.ndarray) -> np.ndarray:
    """(n, 8) factor matrix -> (n, 8) bin indices."""
    return quantize_factor(concepts)
