"""Stage-wise workflow behind the command line: datasets, training, generation, evaluation.

A dataset directory holds::

    manifest.json            splits -> entries, plus provenance
    sequences/<id>.json      canonical programs
    variants/<id>_v<k>.json  surviving scale variants
    renders/<id>_v<k>.pgm    isometric renders
    sketches/<id>_v<k>.pgm   edge sketches
    drop_log.jsonl           variants that failed, with reasons
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .cadlang import encode_sequence, load_sequence, save_sequence, to_json
from .geometry import execute, extract_mesh, normalize, sample_surface, write_obj
from .imaging import make_sketch, read_pgm, render_isometric, scale_variants, write_pgm
from .metrics import (MetricReport, chamfer, cmd_accuracy, cov_mmd_from_matrix, chamfer_matrix,
                      fid, invalid_ratio, jsd, param_accuracy, sequence_is_valid)
from .models import (CcipModel, CdpModel, CsrModel, GenCadConfig, decode_latents,
                     encode_corpus, generate_many, train_ccip, train_cdp, train_csr)
from .models.csr import matrices_to_sequences
from .nn import Adam, param_hash, read_checkpoint
from .retrieval import EmbeddingIndex, build_index, eval_protocol, rank
from .synth import synth_corpus

SEED_ENV = "GENCAD_SEED"


class DependencyError(RuntimeError):
    """A stage was run before the checkpoint it depends on exists."""


# ---------------------------------------------------------------- provenance

def apply_seed_override(cfg):
    """``GENCAD_SEED`` replaces the global seed and every per-stage seed."""
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return cfg
    seed = int(raw)
    cfg.seed = seed
    for s in cfg.SECTIONS:
        setattr(getattr(cfg, s), "seed", seed)
    return cfg


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def provenance(command, cfg, **extra):
    cfg_text = json.dumps(cfg.flat(), sort_keys=True)
    out = {
        "command": command,
        "gencad_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": cfg.seed,
        "config_sha256": hashlib.sha256(cfg_text.encode()).hexdigest(),
        "created_unix": int(time.time()),
    }
    out.update(extra)
    return out


def write_report(path_stem, rows, prov, extra=None):
    """JSON with provenance and the rows, and a CSV table with a provenance comment line."""
    path_stem = Path(path_stem)
    path_stem.parent.mkdir(parents=True, exist_ok=True)
    doc = {"provenance": prov, "rows": rows}
    if extra:
        doc.update(extra)
    doc = _finite(doc)
    path_stem.with_suffix(".json").write_text(
        json.dumps(doc, indent=2, default=_json_default, allow_nan=False))
    keys = []
    for r in rows:
        for k in r:
            if k not in keys and not isinstance(r[k], (dict, list)):
                keys.append(k)
    buf = io.StringIO()
    buf.write("# provenance: " + json.dumps(prov, sort_keys=True, default=_json_default) + "\n")
    w = csv.DictWriter(buf, fieldnames=keys, extrasaction="ignore")
    w.writeheader()
    for r in doc["rows"]:
        w.writerow(r)
    path_stem.with_suffix(".csv").write_text(buf.getvalue())
    return doc


def _finite(o):
    """NaN and infinities become null so reports stay strict JSON."""
    if isinstance(o, dict):
        return {k: _finite(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_finite(v) for v in o]
    if isinstance(o, (float, np.floating)) and not np.isfinite(o):
        return None
    return o


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


# ------------------------------------------------------------------- dataset

def split_ids(ids, train_frac, val_frac, seed):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_train = int(round(train_frac * len(ids)))
    n_val = int(round(val_frac * len(ids)))
    n_train = min(n_train, len(ids))
    n_val = min(n_val, len(ids) - n_train)
    pick = [ids[i] for i in order]
    return {"train": sorted(pick[:n_train]), "val": sorted(pick[n_train:n_train + n_val]),
            "test": sorted(pick[n_train + n_val:])}


def synth_dataset(out_dir, cfg, n=None, seed=None, max_extrudes=4):
    """Write a synthetic corpus and its manifest."""
    out = Path(out_dir)
    (out / "sequences").mkdir(parents=True, exist_ok=True)
    n = cfg.data.n if n is None else n
    seed = cfg.data.seed if seed is None else seed
    seqs = synth_corpus(n, seed=seed, max_extrudes=max_extrudes)
    ids = [f"m{i:05d}" for i in range(n)]
    entries = {}
    for mid, seq in zip(ids, seqs):
        rel = f"sequences/{mid}.json"
        save_sequence(seq, out / rel)
        entries[mid] = {"model_id": mid, "sequence": rel, "renders": [], "sketches": [],
                        "variants": []}
    splits = split_ids(ids, cfg.data.train_frac, cfg.data.val_frac, seed)
    manifest = {
        "provenance": provenance("synth-dataset", cfg, n=n, data_seed=seed),
        "splits": {k: [entries[i] for i in v] for k, v in splits.items()},
    }
    save_manifest(out, manifest)
    return manifest


def save_manifest(root, manifest):
    Path(root, "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_manifest(root, check_files=True):
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(path.read_text())
    seen = set()
    for split, entries in manifest["splits"].items():
        for e in entries:
            if e["model_id"] in seen:
                raise ValueError(f"model {e['model_id']} appears in more than one split")
            seen.add(e["model_id"])
            if check_files:
                for rel in [e["sequence"], *e["renders"], *e["sketches"],
                            *(v["sequence"] for v in e["variants"])]:
                    if not (root / rel).exists():
                        raise FileNotFoundError(f"manifest references missing file {rel}")
    return manifest


def _render_one(args):
    root, entry, size = args
    seq = load_sequence(Path(root) / entry["sequence"])
    mid = entry["model_id"]
    kept, drops = [], []
    for k, var in enumerate(scale_variants(seq)):
        if not var.ok:
            drops.append({"model_id": mid, "variant": k, "factor": var.factor,
                          "reason": var.reason})
            continue
        solid = execute(var.sequence)
        img = render_isometric(solid, size)
        sketch = make_sketch(img)
        stem = f"{mid}_v{k}"
        vrel, rrel, srel = f"variants/{stem}.json", f"renders/{stem}.pgm", f"sketches/{stem}.pgm"
        save_sequence(var.sequence, Path(root) / vrel)
        write_pgm(img, Path(root) / rrel)
        write_pgm(sketch, Path(root) / srel)
        kept.append({"variant": k, "factor": list(var.factor), "sequence": vrel,
                     "render": rrel, "sketch": srel})
    return mid, kept, drops


def render_dataset(root, cfg, size=None, workers=1, limit=None):
    """Scale variants, renders and sketches for every model; failures go to the drop log."""
    root = Path(root)
    manifest = load_manifest(root, check_files=False)
    size = cfg.data.render_size if size is None else size
    for d in ("variants", "renders", "sketches"):
        (root / d).mkdir(exist_ok=True)
    entries = [e for split in ("train", "val", "test") for e in manifest["splits"].get(split, [])]
    if limit is not None:
        entries = entries[:limit]
    jobs = [(str(root), e, size) for e in entries]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_render_one, jobs))
    else:
        results = [_render_one(j) for j in jobs]
    by_id = {mid: (kept, drops) for mid, kept, drops in results}
    drop_lines = []
    for split in manifest["splits"].values():
        for e in split:
            if e["model_id"] not in by_id:
                continue
            kept, drops = by_id[e["model_id"]]
            e["variants"] = kept
            e["renders"] = [v["render"] for v in kept]
            e["sketches"] = [v["sketch"] for v in kept]
            drop_lines.extend(drops)
    (root / "drop_log.jsonl").write_text("".join(json.dumps(d) + "\n" for d in drop_lines))
    manifest["render_provenance"] = provenance("render-dataset", cfg, size=size)
    manifest["render_provenance"].pop("created_unix")
    save_manifest(root, manifest)
    return manifest, drop_lines


def split_sequences(root, manifest, split):
    return [load_sequence(Path(root) / e["sequence"]) for e in manifest["splits"][split]]


def image_pairs(root, manifest, split, kinds=("render", "sketch")):
    """``(images, variant sequences, model ids)`` for every surviving variant and image kind."""
    imgs, seqs, ids = [], [], []
    for e in manifest["splits"][split]:
        for v in e["variants"]:
            seq = load_sequence(Path(root) / v["sequence"])
            for kind in kinds:
                imgs.append(read_pgm(Path(root) / v[kind]))
                seqs.append(seq)
                ids.append(f"{e['model_id']}_v{v['variant']}_{kind}")
    return imgs, seqs, ids


# ------------------------------------------------------------------ training

def _require(path, what):
    if path is None or not Path(path).exists():
        raise DependencyError(f"{what} checkpoint not found: {path}")
    return Path(path)


def _opt_extra(opt):
    return {f"opt/{k}": np.asarray(v) for k, v in opt.state_dict().items()}


def _opt_state(ckpt):
    return {k[4:]: v for k, v in ckpt.tensors.items() if k.startswith("opt/")}


def _logger(path):
    fh = open(path, "a")

    def log(rec):
        fh.write(json.dumps(rec) + "\n")
        fh.flush()
    return log, fh


def train_csr_stage(root, cfg, out, steps=None, resume=None, log_path=None):
    manifest = load_manifest(root)
    seqs = split_sequences(root, manifest, "train")
    mats = encode_corpus(seqs, cfg.csr.n)
    model = CsrModel(cfg.csr)
    start, opt = 0, None
    if resume is not None:
        ckpt = read_checkpoint(_require(resume, "resume"))
        model = CsrModel.load(resume)
        start = int(ckpt.meta.get("step", 0))
        opt = Adam(model.parameters(), lr=model.cfg.lr)
        state = _opt_state(ckpt)
        if state:
            opt.load_state_dict(state)
    log, fh = _logger(log_path or Path(out).with_suffix(".log.jsonl"))
    try:
        opt, step = train_csr(model, mats, steps=steps, log=log, start_step=start, optimizer=opt)
    finally:
        fh.close()
    meta = {"step": step, "provenance": provenance("train-csr", cfg, n_train=len(mats))}
    model.save(out, meta=meta, extra=_opt_extra(opt))
    return model, step


def _frozen_csr(path):
    path = _require(path, "CSR")
    csr = CsrModel.load(path)
    return csr, param_hash(csr)


def _check_unchanged(model, before, what):
    after = param_hash(model)
    if after != before:
        raise RuntimeError(f"frozen {what} parameters changed during training")


def train_ccip_stage(root, cfg, csr_path, out, epochs=None, log_path=None):
    csr, h0 = _frozen_csr(csr_path)
    manifest = load_manifest(root)
    imgs, seqs, _ = image_pairs(root, manifest, "train")
    if len(imgs) < 2:
        raise ValueError("need rendered training pairs; run render-dataset first")
    mats = encode_corpus(seqs, csr.cfg.n)
    z_cad = csr.encode(mats)
    model = CcipModel(cfg.ccip, csr)
    x = model.preprocess(imgs)
    log, fh = _logger(log_path or Path(out).with_suffix(".log.jsonl"))
    try:
        epoch = train_ccip(model, x, z_cad, epochs=epochs, log=log)
    finally:
        fh.close()
    _check_unchanged(csr, h0, "CSR")
    model.save(out, meta={"step": epoch, "provenance": provenance("train-ccip", cfg)})
    return model


def train_cdp_stage(root, cfg, csr_path, ccip_path, out, steps=None, log_path=None):
    csr, h_csr = _frozen_csr(csr_path)
    ccip = CcipModel.load(_require(ccip_path, "CCIP"), csr)
    h_ccip = param_hash(ccip)
    manifest = load_manifest(root)
    imgs, seqs, _ = image_pairs(root, manifest, "train")
    z_cad = csr.encode(encode_corpus(seqs, csr.cfg.n))
    cond = ccip.encode_images(ccip.preprocess(imgs)) if cfg.cdp.conditional else None
    model = CdpModel(cfg.cdp)
    log, fh = _logger(log_path or Path(out).with_suffix(".log.jsonl"))
    try:
        step = train_cdp(model, z_cad, cond, steps=steps, log=log)
    finally:
        fh.close()
    _check_unchanged(csr, h_csr, "CSR")
    _check_unchanged(ccip, h_ccip, "CCIP")
    model.save(out, meta={"step": step, "provenance": provenance("train-cdp", cfg)})
    return model


def load_stack(csr_path, ccip_path, cdp_path):
    csr = CsrModel.load(_require(csr_path, "CSR"))
    ccip = CcipModel.load(_require(ccip_path, "CCIP"), csr)
    cdp = CdpModel.load(_require(cdp_path, "CDP"))
    return csr, ccip, cdp


# ---------------------------------------------------------------- generation

def generate_stage(images, csr, ccip, cdp, out_dir, n_per_image=1, seed=0, cfg=None,
                   image_names=None, write_geometry=True):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [seed + k for k in range(n_per_image)]
    results = generate_many(images, ccip, cdp, csr, seeds)
    names = image_names or [f"img{i:03d}" for i in range(len(images))]
    rows = []
    for r_i, res in enumerate(results):
        name = f"{names[r_i // n_per_image]}_s{seeds[r_i % n_per_image]}"
        row = {"output": name, **res.status(), "program": None}
        if res.sequence is not None:
            (out / f"{name}.json").write_text(to_json(res.sequence))
            row["program"] = f"{name}.json"
        else:
            (out / f"{name}.json").write_text(json.dumps({"error": res.reason}))
            row["program"] = f"{name}.json"
        if res.valid and write_geometry:
            solid = execute(res.sequence)
            write_obj(extract_mesh(solid), out / f"{name}.obj")
            write_pgm(render_isometric(solid, 224), out / f"{name}.pgm")
        rows.append(row)
    ir = 1.0 - float(np.mean([r["valid"] for r in rows])) if rows else 0.0
    prov = provenance("generate", cfg or GenCadConfig(), n_images=len(images),
                      n_per_image=n_per_image, base_seed=seed)
    write_report(out / "report", rows, prov, {"invalid_ratio": ir})
    return rows, ir


# ---------------------------------------------------------------- evaluation

def surface_cloud(seq, n_points, seed=0):
    return normalize(sample_surface(execute(seq), n_points, seed=seed)).points


def evaluate_recon_stage(root, cfg, csr_path, out, split="test", self_check=False):
    """Reconstruction metrics; ``self_check`` scores ground truth against itself."""
    manifest = load_manifest(root)
    seqs = split_sequences(root, manifest, split)
    if not seqs:
        raise ValueError(f"split {split!r} is empty")
    gt = encode_corpus(seqs, cfg.csr.n)
    if self_check:
        pred = gt.copy()
    else:
        csr = CsrModel.load(_require(csr_path, "CSR"))
        pred = csr.reconstruct(gt)
    recon = [seqs[i] if self_check else s for i, s in enumerate(matrices_to_sequences(pred))]
    eta = cfg.eval.eta
    cds = []
    for g, r in zip(seqs, recon):
        if sequence_is_valid(r):
            # same sampling seed on both sides, so identical programs score exactly 0
            cds.append(chamfer(surface_cloud(g, cfg.eval.n_points, seed=cfg.eval.seed),
                               surface_cloud(r, cfg.eval.n_points, seed=cfg.eval.seed)))
    protocol = {"split": split, "n": len(seqs), "eta": eta, "n_points": cfg.eval.n_points,
                "chamfer": "squared, bidirectional mean, longest extent scaled to 2",
                "self_check": self_check}
    rows = [
        MetricReport("mu_cmd", [cmd_accuracy(pred, gt)], protocol).to_dict(),
        MetricReport("mu_param", [param_accuracy(pred, gt, eta)], protocol).to_dict(),
        MetricReport("mu_cd", [float(np.mean(cds)) if cds else float("nan")],
                     {**protocol, "n_valid": len(cds)}).to_dict(),
        MetricReport("ir", [invalid_ratio(recon)], protocol).to_dict(),
    ]
    for r in rows:
        r["value"] = r["mean"]
    write_report(out, rows, provenance("evaluate-recon", cfg))
    return {r["metric"]: r["mean"] for r in rows}


def generative_metrics(ref_clouds, gen_clouds, ref_lat=None, gen_lat=None, grid=28):
    D = chamfer_matrix(ref_clouds, gen_clouds)
    c, m = cov_mmd_from_matrix(D)
    out = {"cov": c, "mmd": m, "jsd": jsd(ref_clouds, gen_clouds, grid)}
    if ref_lat is not None and gen_lat is not None:
        out["fid"] = fid(ref_lat, gen_lat)
    return out


def evaluate_gen_stage(root, cfg, out, csr_path=None, cdp_path=None, split="test",
                       ref_size=None, gen_size=None, pool_factor=2.5, repeats=None,
                       self_check=False):
    """COV / MMD / JSD on surface clouds and FID on CSR latents, repeated.

    Generated shapes come from unconditional prior samples decoded by the
    CSR model; ``self_check`` uses the reference set as the generated set.
    """
    manifest = load_manifest(root)
    seqs = split_sequences(root, manifest, split)
    ev = cfg.eval
    ref_size = min(ev.ref_size if ref_size is None else ref_size, len(seqs))
    gen_size = ev.gen_size if gen_size is None else gen_size
    repeats = ev.repeats if repeats is None else repeats
    rng = np.random.default_rng(ev.seed)
    csr = CsrModel.load(_require(csr_path, "CSR")) if csr_path else None
    cdp = None if self_check else CdpModel.load(_require(cdp_path, "CDP"))
    values = {"cov": [], "mmd": [], "jsd": [], "fid": []}
    n_invalid = 0
    for r in range(repeats):
        ref_idx = rng.choice(len(seqs), ref_size, replace=False)
        ref = [seqs[i] for i in ref_idx]
        ref_clouds = [surface_cloud(s, ev.n_points, seed=r) for s in ref]
        ref_lat = csr.encode(encode_corpus(ref, csr.cfg.n)) if csr is not None else None
        if self_check:
            gen_clouds, gen_lat = ref_clouds, ref_lat
        else:
            pool_n = int(np.ceil(gen_size * pool_factor))
            z = cdp.sample(pool_n, None, seed=ev.seed + r)
            res = decode_latents(csr, z)
            good = [x for x in res if x.valid]
            n_invalid += len(res) - len(good)
            if not good:
                raise ValueError(f"no valid program among {pool_n} prior samples")
            pick = rng.choice(len(good), min(gen_size, len(good)), replace=False)
            gen = [good[i] for i in pick]
            gen_clouds = [surface_cloud(x.sequence, ev.n_points, seed=r) for x in gen]
            gen_lat = np.stack([x.latent for x in gen])
        m = generative_metrics(ref_clouds, gen_clouds, ref_lat, gen_lat, ev.jsd_grid)
        for k in values:
            if k in m:
                values[k].append(m[k])
    protocol = {"split": split, "ref_size": ref_size, "gen_size": gen_size,
                "pool_factor": pool_factor, "repeats": repeats, "n_points": ev.n_points,
                "jsd_grid": ev.jsd_grid, "seed": ev.seed, "self_check": self_check,
                "invalid_pool_samples": n_invalid}
    rows = [MetricReport(k, v, protocol).to_dict() for k, v in values.items() if v]
    write_report(out, rows, provenance("evaluate-gen", cfg))
    return {r["metric"]: r["mean"] for r in rows}


# ----------------------------------------------------------------- retrieval

def build_index_stage(root, csr_path, out, split="test"):
    csr = CsrModel.load(_require(csr_path, "CSR"))
    manifest = load_manifest(root)
    entries = manifest["splits"][split]
    seqs = [load_sequence(Path(root) / e["sequence"]) for e in entries]
    index = build_index(csr, encode_corpus(seqs, csr.cfg.n), [e["model_id"] for e in entries])
    index.save(out)
    return index


def retrieve_stage(image_path, index_path, ccip, k=10):
    index = EmbeddingIndex.load(index_path)
    x = ccip.preprocess([read_pgm(image_path)])
    return rank(ccip.encode_images(x)[0], index, k)


def protocol_stage(cfg, out, image_latents, cad_latents, batch_sizes, repeats, seed=0,
                   queries="all", label="model"):
    rows = []
    for nb, rep in zip(batch_sizes, repeats):
        if nb > len(cad_latents):
            continue
        res = eval_protocol(image_latents, cad_latents, nb, rep, seed, queries)
        rows.append({"method": label, **res.to_dict()})
    write_report(out, rows, provenance("retrieve", cfg, queries=queries))
    return rows


def latents_for_split(root, split, csr, ccip, kind="render"):
    """Paired (image latent, CAD latent) rows using the unscaled variant of each model."""
    manifest = load_manifest(root)
    imgs, mats = [], []
    for e in manifest["splits"][split]:
        base = [v for v in e["variants"] if v["variant"] == 0]
        if not base:
            continue
        imgs.append(read_pgm(Path(root) / base[0][kind]))
        mats.append(encode_sequence(load_sequence(Path(root) / base[0]["sequence"]), csr.cfg.n))
    if not imgs:
        raise ValueError(f"no rendered models in split {split!r}")
    z_img = ccip.encode_images(ccip.preprocess(imgs))
    return z_img, csr.encode(np.stack(mats))


def echo_json(obj):
    """One-line strict JSON for command summaries."""
    return json.dumps(_finite(obj), default=_json_default, allow_nan=False)
