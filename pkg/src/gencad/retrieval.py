"""Image-to-program retrieval over an embedded corpus and the batch evaluation protocol.

Index file layout (``GCIX1``, little-endian)::

    b"GCIX1" u32 n u32 d u32 has_image
    n x (u32 byte length, utf-8 id)
    n*d f32 CAD rows, then n*d f32 image rows when has_image
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"GCIX1"


class IndexFormatError(ValueError):
    pass


def l2_normalize(x):
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, 1e-12)


@dataclass
class EmbeddingIndex:
    ids: list
    cad: np.ndarray
    image: np.ndarray | None = None

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("index ids must be unique")
        self.cad = l2_normalize(self.cad).astype(np.float32)
        if len(self.ids) != len(self.cad):
            raise ValueError(f"{len(self.ids)} ids for {len(self.cad)} rows")
        if self.image is not None:
            self.image = l2_normalize(self.image).astype(np.float32)
            if self.image.shape != self.cad.shape:
                raise ValueError("image rows must match CAD rows")
        self._rank = np.empty(len(self.ids), dtype=np.int64)
        self._rank[np.argsort(np.asarray(self.ids, dtype=object), kind="stable")] = \
            np.arange(len(self.ids))

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.cad.shape[1]

    def to_bytes(self):
        n, d = self.cad.shape
        parts = [MAGIC, struct.pack("<III", n, d, int(self.image is not None))]
        for i in self.ids:
            b = str(i).encode("utf-8")
            parts.append(struct.pack("<I", len(b)) + b)
        parts.append(self.cad.astype("<f4").tobytes())
        if self.image is not None:
            parts.append(self.image.astype("<f4").tobytes())
        return b"".join(parts)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob):
        if blob[:5] != MAGIC:
            raise IndexFormatError("not a GCIX1 index")
        try:
            n, d, has_img = struct.unpack_from("<III", blob, 5)
            pos = 17
            ids = []
            for _ in range(n):
                (ln,) = struct.unpack_from("<I", blob, pos)
                ids.append(blob[pos + 4:pos + 4 + ln].decode("utf-8"))
                pos += 4 + ln
            size = n * d * 4
            cad = np.frombuffer(blob[pos:pos + size], dtype="<f4")
            pos += size
            img = np.frombuffer(blob[pos:pos + size], dtype="<f4") if has_img else None
            if cad.size != n * d or (img is not None and img.size != n * d):
                raise IndexFormatError("truncated GCIX1 index")
        except struct.error:
            raise IndexFormatError("truncated GCIX1 index") from None
        cad = cad.reshape(n, d)
        return cls(ids, cad, None if img is None else img.reshape(n, d))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def build_index(csr, mats, ids, image_latents=None, batch=64):
    """Encode every sequence matrix with the frozen CSR encoder."""
    mats = np.asarray(mats)
    z = np.concatenate([csr.encode(mats[i:i + batch]) for i in range(0, len(mats), batch)])
    return EmbeddingIndex(list(ids), z, image_latents)


def rank(query, index, k=10):
    """Top-``k`` ``(id, cosine similarity)`` for one latent query.

    Ties are broken by ascending id.
    """
    q = l2_normalize(np.asarray(query).reshape(-1))
    if q.shape[0] != index.dim:
        raise ValueError(f"query dim {q.shape[0]} != index dim {index.dim}")
    sims = np.clip(index.cad.astype(np.float64) @ q, -1.0, 1.0)
    order = np.lexsort((index._rank, -sims))[:max(k, 0)]
    return [(index.ids[i], float(sims[i])) for i in order]


def retrieve(image, index, ccip, k=10):
    """Rank indexed programs for a gray image using the CCIP image encoder."""
    x = ccip.preprocess([image])
    return rank(ccip.encode_images(x)[0], index, k)


@dataclass
class ProtocolResult:
    n_b: int
    repeats: int
    mean: float  # percent
    std: float  # sample standard deviation over repeats, percent
    scores: np.ndarray
    queries: str

    def to_dict(self):
        return {"n_b": self.n_b, "repeats": self.repeats, "mean": self.mean, "std": self.std,
                "queries": self.queries}


def eval_protocol(image_latents, cad_latents, n_b, repeats, seed=0, queries="all"):
    """Top-1 retrieval rate over random batches of ``n_b`` programs.

    Each repeat samples ``n_b`` items and scores the ``n_b x n_b`` image-CAD
    cosine matrix. With ``queries="all"`` every row is a query and the
    repeat's score is the hit fraction; ``queries="single"`` scores one
    randomly chosen row. Batch members are kept in index order, so ties
    resolve to the lowest position.
    """
    img = l2_normalize(image_latents)
    cad = l2_normalize(cad_latents)
    n = len(cad)
    if not 1 <= n_b <= n:
        raise ValueError(f"batch size {n_b} outside 1..{n}")
    if queries not in ("all", "single"):
        raise ValueError(f"queries must be 'all' or 'single', got {queries!r}")
    rng = np.random.default_rng(seed)
    scores = np.empty(repeats)
    for r in range(repeats):
        batch = np.sort(rng.choice(n, n_b, replace=False))
        sim = img[batch] @ cad[batch].T
        hits = sim.argmax(1) == np.arange(n_b)
        if queries == "single":
            scores[r] = float(hits[rng.integers(n_b)])
        else:
            scores[r] = float(hits.mean())
    scores *= 100.0
    std = float(scores.std(ddof=1)) if repeats > 1 else 0.0
    return ProtocolResult(n_b, repeats, float(scores.mean()), std, scores, queries)
