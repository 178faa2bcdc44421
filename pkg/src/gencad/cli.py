"""``gencad`` command line: one subcommand per pipeline stage."""
from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import pipeline
from .imaging import read_pgm
from .models import CcipModel, CsrModel, GenCadConfig, dump_config, load_config
from .nn import CheckpointError


def _config(ctx):
    return ctx.obj["cfg"]


def _fail(exc):
    raise click.ClickException(str(exc)) from exc


def _ints(text):
    return [int(t) for t in text.split(",") if t.strip()]


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Flat key = value config file.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override one config key, e.g. --set csr.steps=200.")
@click.version_option(package_name="artifact", prog_name="gencad")
@click.pass_context
def main(ctx, config_path, overrides):
    """Image-conditioned CAD program generation.

    GENCAD_SEED, when set, overrides every seed in the config.
    """
    try:
        cfg = load_config(config_path) if config_path else GenCadConfig()
        for item in overrides:
            if "=" not in item:
                raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            cfg.set(k.strip(), v.strip())
    except (KeyError, ValueError) as exc:
        _fail(exc)
    ctx.obj = {"cfg": pipeline.apply_seed_override(cfg)}


@main.command("init-config")
@click.argument("out", type=click.Path(dir_okay=False))
@click.pass_context
def init_config(ctx, out):
    """Write the effective config, with reference values as comments."""
    Path(out).write_text(dump_config(_config(ctx)))
    click.echo(out)


@main.command("synth-dataset")
@click.argument("out", type=click.Path(file_okay=False))
@click.option("--n", type=int, help="Number of programs (default data.n).")
@click.option("--seed", type=int, help="Corpus seed (default data.seed).")
@click.option("--max-extrudes", type=click.IntRange(1, 4), default=4, show_default=True)
@click.pass_context
def synth_dataset(ctx, out, n, seed, max_extrudes):
    """Sample a synthetic corpus of valid programs and write its manifest."""
    m = pipeline.synth_dataset(out, _config(ctx), n=n, seed=seed, max_extrudes=max_extrudes)
    click.echo(pipeline.echo_json({k: len(v) for k, v in m["splits"].items()}))


@main.command("render-dataset")
@click.argument("root", type=click.Path(exists=True, file_okay=False))
@click.option("--size", type=int, help="Render size in pixels (default data.render_size).")
@click.option("--workers", type=click.IntRange(1), default=1, show_default=True)
@click.option("--limit", type=int, help="Only the first LIMIT models.")
@click.pass_context
def render_dataset(ctx, root, size, workers, limit):
    """Scale variants, isometric renders and sketches for every model."""
    try:
        m, drops = pipeline.render_dataset(root, _config(ctx), size=size, workers=workers,
                                           limit=limit)
    except FileNotFoundError as exc:
        _fail(exc)
    kept = sum(len(e["variants"]) for s in m["splits"].values() for e in s)
    click.echo(pipeline.echo_json({"variants": kept, "dropped": len(drops)}))


@main.command("train-csr")
@click.argument("root", type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--steps", type=int, help="Steps to run now (default csr.steps).")
@click.option("--resume", type=click.Path(dir_okay=False), help="Continue from a checkpoint.")
@click.pass_context
def train_csr(ctx, root, out, steps, resume):
    """Train the sequence autoencoder."""
    try:
        _, step = pipeline.train_csr_stage(root, _config(ctx), out, steps=steps, resume=resume)
    except (pipeline.DependencyError, CheckpointError, FileNotFoundError) as exc:
        _fail(exc)
    click.echo(pipeline.echo_json({"checkpoint": out, "step": step}))


@main.command("train-ccip")
@click.argument("root", type=click.Path(exists=True, file_okay=False))
@click.option("--csr", "csr_path", type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--epochs", type=int)
@click.pass_context
def train_ccip(ctx, root, csr_path, out, epochs):
    """Contrastive image encoder against the frozen CSR encoder."""
    try:
        pipeline.train_ccip_stage(root, _config(ctx), csr_path, out, epochs=epochs)
    except (pipeline.DependencyError, CheckpointError, ValueError) as exc:
        _fail(exc)
    click.echo(pipeline.echo_json({"checkpoint": out}))


@main.command("train-cdp")
@click.argument("root", type=click.Path(exists=True, file_okay=False))
@click.option("--csr", "csr_path", type=click.Path(dir_okay=False))
@click.option("--ccip", "ccip_path", type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--steps", type=int)
@click.pass_context
def train_cdp(ctx, root, csr_path, ccip_path, out, steps):
    """Latent diffusion prior over frozen CSR latents."""
    try:
        pipeline.train_cdp_stage(root, _config(ctx), csr_path, ccip_path, out, steps=steps)
    except (pipeline.DependencyError, CheckpointError, ValueError) as exc:
        _fail(exc)
    click.echo(pipeline.echo_json({"checkpoint": out}))


@main.command("generate")
@click.argument("images", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--csr", "csr_path", type=click.Path(dir_okay=False))
@click.option("--ccip", "ccip_path", type=click.Path(dir_okay=False))
@click.option("--cdp", "cdp_path", type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--n-per-image", type=click.IntRange(1), default=1, show_default=True)
@click.option("--seed", type=int, help="Base sample seed (default: config seed).")
@click.pass_context
def generate(ctx, images, csr_path, ccip_path, cdp_path, out, n_per_image, seed):
    """Programs, meshes and renders for each input image (PGM)."""
    cfg = _config(ctx)
    try:
        csr, ccip, cdp = pipeline.load_stack(csr_path, ccip_path, cdp_path)
    except (pipeline.DependencyError, CheckpointError) as exc:
        _fail(exc)
    imgs = [read_pgm(p) for p in images]
    names = [Path(p).stem for p in images]
    rows, ir = pipeline.generate_stage(imgs, csr, ccip, cdp, out, n_per_image,
                                       cfg.seed if seed is None else seed, cfg, names)
    click.echo(pipeline.echo_json({"outputs": len(rows), "invalid_ratio": ir}))


@main.command("evaluate-recon")
@click.argument("root", type=click.Path(exists=True, file_okay=False))
@click.option("--csr", "csr_path", type=click.Path(dir_okay=False))
@click.option("--out", required=True, help="Report path stem; .json and .csv are written.")
@click.option("--split", default="test", show_default=True)
@click.option("--self-check", is_flag=True, help="Score ground truth against itself.")
@click.pass_context
def evaluate_recon(ctx, root, csr_path, out, split, self_check):
    """Command accuracy, parameter accuracy, chamfer distance and invalid ratio."""
    try:
        res = pipeline.evaluate_recon_stage(root, _config(ctx), csr_path, out, split, self_check)
    except (pipeline.DependencyError, CheckpointError, ValueError) as exc:
        _fail(exc)
    click.echo(pipeline.echo_json(res))


@main.command("evaluate-gen")
@click.argument("root", type=click.Path(exists=True, file_okay=False))
@click.option("--csr", "csr_path", type=click.Path(dir_okay=False))
@click.option("--cdp", "cdp_path", type=click.Path(dir_okay=False))
@click.option("--out", required=True)
@click.option("--split", default="test", show_default=True)
@click.option("--ref-size", type=int)
@click.option("--gen-size", type=int)
@click.option("--repeats", type=int)
@click.option("--self-check", is_flag=True, help="Use the reference set as the generated set.")
@click.pass_context
def evaluate_gen(ctx, root, csr_path, cdp_path, out, split, ref_size, gen_size, repeats,
                 self_check):
    """COV, MMD and JSD on surface samples, FID on CSR latents."""
    try:
        res = pipeline.evaluate_gen_stage(root, _config(ctx), out, csr_path, cdp_path, split,
                                          ref_size, gen_size, repeats=repeats,
                                          self_check=self_check)
    except (pipeline.DependencyError, CheckpointError, ValueError) as exc:
        _fail(exc)
    click.echo(pipeline.echo_json(res))


@main.command("retrieve")
@click.argument("root", required=False, type=click.Path(exists=True, file_okay=False))
@click.option("--csr", "csr_path", type=click.Path(dir_okay=False))
@click.option("--ccip", "ccip_path", type=click.Path(dir_okay=False))
@click.option("--out", help="Report path stem for the batch protocol.")
@click.option("--split", default="test", show_default=True)
@click.option("--batch-sizes", default="10,128,1024,2048", show_default=True)
@click.option("--repeats", default="1000,1000,1000,1000", show_default=True)
@click.option("--queries", type=click.Choice(["all", "single"]), default="all", show_default=True)
@click.option("--random-baseline", type=int, metavar="N",
              help="Score N random embeddings instead of trained models.")
@click.option("--kind", type=click.Choice(["render", "sketch"]), default="render",
              show_default=True)
@click.option("--image", type=click.Path(exists=True, dir_okay=False),
              help="Rank the split's programs for this image instead.")
@click.option("--top-k", type=int, default=10, show_default=True)
@click.pass_context
def retrieve(ctx, root, csr_path, ccip_path, out, split, batch_sizes, repeats, queries,
             random_baseline, kind, image, top_k):
    """Batch top-1 retrieval protocol, or top-k programs for one image."""
    cfg = _config(ctx)
    nbs, reps = _ints(batch_sizes), _ints(repeats)
    if len(reps) == 1:
        reps = reps * len(nbs)
    if len(nbs) != len(reps):
        raise click.UsageError("--repeats needs one value or one per batch size")
    if random_baseline:
        rng = np.random.default_rng(cfg.seed)
        z_img = rng.standard_normal((random_baseline, cfg.csr.d_z))
        z_cad = rng.standard_normal((random_baseline, cfg.csr.d_z))
        label = "random"
    else:
        if root is None:
            raise click.UsageError("ROOT is required unless --random-baseline is given")
        try:
            csr = CsrModel.load(pipeline._require(csr_path, "CSR"))
            ccip = CcipModel.load(pipeline._require(ccip_path, "CCIP"), csr)
        except (pipeline.DependencyError, CheckpointError) as exc:
            _fail(exc)
        if image is not None:
            idx_path = Path(out or "retrieval").with_suffix(".gcix")
            pipeline.build_index_stage(root, csr_path, idx_path, split)
            for mid, sim in pipeline.retrieve_stage(image, idx_path, ccip, top_k):
                click.echo(f"{mid}\t{sim:.6f}")
            return
        z_img, z_cad = pipeline.latents_for_split(root, split, csr, ccip, kind)
        label = "model"
    if out is None:
        raise click.UsageError("--out is required for the batch protocol")
    rows = pipeline.protocol_stage(cfg, out, z_img, z_cad, nbs, reps, cfg.seed, queries, label)
    for r in rows:
        click.echo(f"R@{r['n_b']}\t{r['mean']:.2f} +/- {r['std']:.2f}")


if __name__ == "__main__":
    sys.exit(main())
