"""Image -> CAD program: image latent, diffusion prior sample, greedy CSR decode."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cadlang import CadFormatError, CadSequence, decode_sequence, validate
from ..geometry import GeometryError, execute, is_valid


@dataclass
class GenerationResult:
    sequence: CadSequence | None
    matrix: np.ndarray
    latent: np.ndarray
    grammar_ok: bool
    valid: bool
    reason: str = ""

    def status(self):
        return {"grammar_ok": self.grammar_ok, "valid": self.valid, "reason": self.reason}


def check_program(mat):
    """Decode and validate a predicted matrix; never raises."""
    try:
        seq = decode_sequence(mat)
    except (CadFormatError, ValueError) as exc:
        return None, False, False, f"decode: {exc}"
    report = validate(seq)
    if not report.ok:
        return seq, False, False, "invalid program: " + "; ".join(report.rules)
    try:
        solid = execute(seq)
    except GeometryError as exc:
        return seq, True, False, f"kernel error: {exc}"
    if not is_valid(solid):
        return seq, True, False, "empty solid"
    return seq, True, True, ""


def decode_latents(csr, z):
    """Greedy-decode latents (clipped to the tanh range) into checked programs."""
    z = np.clip(np.atleast_2d(z), -1.0, 1.0)
    mats = csr.decode(z)
    out = []
    for zi, m in zip(z, mats):
        seq, gok, ok, why = check_program(m)
        out.append(GenerationResult(seq, m, zi, gok, ok, why))
    return out


def generate(image, ccip, cdp, csr, seed=0):
    """One program for one gray image; identical ``(image, seed)`` gives identical output."""
    ccip.eval()
    csr.eval()
    x = ccip.preprocess([image])
    z_img = ccip.encode_images(x)
    z = cdp.sample(1, cond=z_img, seed=seed)
    return decode_latents(csr, z)[0]


def generate_many(images, ccip, cdp, csr, seeds):
    """Every image crossed with every seed, image-major order."""
    ccip.eval()
    csr.eval()
    x = ccip.preprocess(images)
    z_img = ccip.encode_images(x)
    latents = [cdp.sample(1, cond=z_img[i:i + 1], seed=s)[0]
               for i in range(len(images)) for s in seeds]
    return decode_latents(csr, np.stack(latents))
