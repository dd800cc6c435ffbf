"""Command-line entry points: train, sample, eval, diagnose, oracle."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .datasets import DatasetSpec, generate
from .diffusion import forward_noise
from .evaluation import nfe_sweep
from .metrics import sliced_wasserstein
from .oracle import exact_shortest, load_graph, relaxation_fixpoint, self_test
from .persistence import (Checkpoint, RunDir, file_id, format_record, load_checkpoint,
                          load_config, save_checkpoint, save_samples, training_data, dump_config,
                          _versions)
from .residuals import PerfectPredictor, dist, edge_weight, path_residual_report, relaxation_cond, transfer_pair
from .sampler import initial_noise, make_step_schedule, sample_from
from .trainer import ConfigError, TrainingDiverged, init_state, run_training, sample_step_pair

log = logging.getLogger("shortdf")

REFERENCE_SEED_OFFSET = 1_000_003


def _reference(ckpt: Checkpoint, n: int, seed: int | None) -> np.ndarray:
    cfg = ckpt.cfg
    if cfg.dataset == "tiny_images_dir":
        spec = DatasetSpec(kind=cfg.dataset, n=n, seed=seed or 0, image_dir=cfg.image_dir,
                           normalization=ckpt.info.normalization, image_shape=ckpt.info.image_shape)
    else:
        seed = cfg.data_seed + REFERENCE_SEED_OFFSET if seed is None else seed
        spec = DatasetSpec(kind=cfg.dataset, n=n, seed=seed, normalization=ckpt.info.normalization)
    return generate(spec)


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config, seed=args.seed, total_iterations=args.iterations,
                          relax_enabled=False if args.disable_relax else None)
    except ConfigError as exc:
        log.error("invalid config: %s", exc)
        return 2
    data, info = training_data(cfg)
    if args.resume:
        ckpt = load_checkpoint(args.resume, data=data)
        resumed = ckpt.cfg
        resumed.total_iterations = cfg.total_iterations
        cfg, state = resumed, ckpt.state
    else:
        state = init_state(cfg, info.input_dim, data, info.image_shape)
    with RunDir(args.out, cfg) as run:
        (run.path / "config.yaml").write_text(dump_config(cfg))
        meta = {"seed": cfg.seed, "data_seed": cfg.data_seed, "resumed_from": str(args.resume or ""),
                "start_iteration": state.iteration, "versions": _versions()}
        (run.path / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        log_file = open(run.path / "train_log.jsonl", "w")

        def on_log(rec):
            log_file.write(format_record(rec) + "\n")

        def on_checkpoint(st):
            save_checkpoint(run.checkpoint_path(st.iteration), cfg, st, info)

        try:
            run_training(cfg, state, on_log=on_log, on_checkpoint=on_checkpoint)
        except TrainingDiverged as exc:
            (run.path / "diverged.json").write_text(json.dumps(exc.diagnostics, indent=1, sort_keys=True))
            log.error("training aborted: %s", exc)
            return 3
        finally:
            log_file.close()
        final = run.path / "final.npz"
        save_checkpoint(final, cfg, state, info)
        log.info("run directory %s", run.path)
        print(final)
    return 0


# ---------------------------------------------------------------- sample

def _pick_model(ckpt: Checkpoint, which: str):
    return getattr(ckpt.state.triplet, which)


def _contact_sheet(images: np.ndarray, shape, path: Path, cols: int = 8) -> None:
    from PIL import Image

    c, h, w = shape
    n = min(len(images), cols * cols)
    rows = -(-n // cols)
    sheet = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
    imgs = np.clip(np.rint(images[:n]), 0, 255).astype(np.uint8).reshape(n, c, h, w).transpose(0, 2, 3, 1)
    for i, img in enumerate(imgs):
        r, q = divmod(i, cols)
        sheet[r * h:(r + 1) * h, q * w:(q + 1) * w] = img
    Image.fromarray(sheet[..., 0] if c == 1 else sheet).save(path)


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    s = ckpt.schedule
    if not 1 <= args.nfe <= s.T:
        log.error("--nfe must lie in [1, T=%d], got %d", s.T, args.nfe)
        return 2
    path = make_step_schedule(s.T, args.nfe, args.strategy)
    smallest = path.steps[-1]
    if args.sigma < 0 or args.sigma ** 2 > 1.0 - s.alpha_bar(smallest):
        log.error("--sigma %g outside [0, sqrt(1 - alpha_bar_%d)] = [0, %.6g]", args.sigma, smallest,
                  (1.0 - s.alpha_bar(smallest)) ** 0.5)
        return 2
    model = _pick_model(ckpt, args.model)
    dtype = next(model.parameters()).dtype
    x = initial_noise((args.n, ckpt.info.input_dim), args.seed, dtype)
    counter = [0]
    out = sample_from(model, s, path, x, sigma=args.sigma, seed=args.seed, counter=counter)
    samples = out.numpy().astype(np.float64)
    log.info("model evaluations: %d", counter[0])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"samples_{args.model}_nfe{args.nfe}_seed{args.seed}"
    data_space = ckpt.info.normalization.invert(samples)
    header = {"seed": args.seed, "nfe": args.nfe, "path": list(path.steps), "strategy": path.strategy,
              "sigma": args.sigma, "model": args.model, "checkpoint_id": file_id(args.checkpoint),
              "model_evaluations": counter[0]}
    save_samples(out_dir / f"{stem}.npz", samples, header)
    record = dict(header)
    if ckpt.info.image_shape is None:
        np.savetxt(out_dir / f"{stem}.txt", data_space, fmt="%.9g")
        ref = _reference(ckpt, args.n, None)
        record["sliced_wasserstein"] = sliced_wasserstein(samples, ref, 64, 0)
    else:
        _contact_sheet(data_space, ckpt.info.image_shape, out_dir / f"{stem}.png")
    (out_dir / f"{stem}.json").write_text(json.dumps(record, sort_keys=True) + "\n")
    print(json.dumps(record, sort_keys=True))
    return 0


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    paths = [Path(p) for p in args.checkpoints]
    for p in paths:
        if not p.is_file():
            log.error("missing checkpoint: %s", p)
            return 2
    labels = args.labels.split(",") if args.labels else [p.stem if p.stem != "final" else p.parent.name for p in paths]
    if len(labels) != len(paths) or len(set(labels)) != len(labels):
        log.error("need one distinct label per checkpoint")
        return 2
    ckpts = [load_checkpoint(p) for p in paths]
    nfe_list = [int(v) for v in args.nfe.split(",")]
    for c in ckpts:
        if max(nfe_list) > c.schedule.T:
            log.error("NFE %d exceeds T=%d", max(nfe_list), c.schedule.T)
            return 2
    reference = _reference(ckpts[0], args.n, args.reference_seed)
    models = {lab: (_pick_model(c, args.model), c.schedule) for lab, c in zip(labels, ckpts)}
    kwargs = {}
    if args.metric == "sliced_wasserstein":
        kwargs = {"n_projections": args.projections, "seed": 0}
    report = nfe_sweep(models, nfe_list, reference, args.metric, n_samples=args.n, seed=args.seed,
                       metric_kwargs=kwargs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "nfe_sweep.csv").write_text(report.to_csv())
    (out_dir / "nfe_sweep.txt").write_text(report.to_text())
    if not args.no_plot:
        report.plot(out_dir / "nfe_sweep.png")
    print(report.to_text(), end="")
    return 0


# ---------------------------------------------------------------- diagnose

def diagnose(ckpt: Checkpoint, pairs: int, batch: int, seed: int, perfect: bool) -> dict:
    s = ckpt.schedule
    tri = ckpt.state.triplet
    dtype = next(tri.base.parameters()).dtype
    spec = DatasetSpec(kind=ckpt.cfg.dataset, n=batch, seed=seed, image_dir=ckpt.cfg.image_dir,
                       normalization=ckpt.info.normalization, image_shape=ckpt.info.image_shape)
    x0 = torch.from_numpy(generate(spec)[:batch]).to(dtype)
    rng = np.random.Generator(np.random.PCG64(seed))
    base = ema = graph = None
    if perfect:
        base = ema = graph = PerfectPredictor(x0, s)
    else:
        base, ema, graph = tri.base, tri.ema, tri.graph
    r0, edges, fired = [], [], []
    with torch.no_grad():
        for _ in range(pairs):
            t, k = sample_step_pair(rng, s.T)
            eps = torch.from_numpy(rng.standard_normal(tuple(x0.shape))).to(dtype)
            x_t = forward_noise(x0, eps, t, s)
            d_t = dist(x0, x_t, t, base, s)
            pair = transfer_pair(x0, x_t, t, k, graph, s)
            e = edge_weight(x0, x_t, t, k, graph, s, pair=pair)
            d_k = dist(x0, pair[1], k, ema, s)
            r0.append(float(d_t.mean()))
            edges.append(float(e.mean()))
            fired.append(float(relaxation_cond(d_t, d_k, e).to(torch.float64).mean()))
        eps = torch.from_numpy(rng.standard_normal(tuple(x0.shape))).to(dtype)
        report = path_residual_report(x0, make_step_schedule(s.T, min(5, s.T)), base, s, eps)
    return {"pairs": pairs, "perfect_predictor": perfect,
            "mean_abs_initial_residual": float(np.mean(r0)), "mean_edge": float(np.mean(edges)),
            "cond_rate": float(np.mean(fired)), "path_residual": report.to_record()}


def cmd_diagnose(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    summary = diagnose(ckpt, args.pairs, args.batch, args.seed, args.perfect)
    print(json.dumps(summary, sort_keys=True))
    if args.oracle_graphs:
        matched, total = self_test(args.oracle_graphs, seed=args.seed)
        print(f"{matched}/{total} graphs matched")
        if matched != total:
            return 1
    return 0


def cmd_oracle(args) -> int:
    g = load_graph(args.graph)
    exact = exact_shortest(g)
    relaxed = relaxation_fixpoint(g, args.order, seed=args.seed)
    for n in g.nodes:
        route = "->".join(str(v) for v in relaxed.path(n))
        print(f"{n}\t{exact[n]!r}\t{relaxed.dist[n]!r}\t{route}")
    return 0 if all(abs(exact[n] - relaxed.dist[n]) <= 1e-12 for n in g.nodes) else 1


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shortdf", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run multi-state training")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--disable-relax", action="store_true")
    t.add_argument("--resume")
    t.add_argument("--out", default="runs")
    t.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="generate samples from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--nfe", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--model", choices=("base", "ema"), default="ema")
    sp.add_argument("--strategy", choices=("uniform", "quadratic"), default="uniform")
    sp.add_argument("--sigma", type=float, default=0.0)
    sp.add_argument("--out", default="samples")
    sp.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="NFE sweep over checkpoints with matched noise")
    e.add_argument("--checkpoints", nargs="+", required=True)
    e.add_argument("--labels")
    e.add_argument("--nfe", default="1,2,5,10")
    e.add_argument("--metric", choices=("sliced_wasserstein", "mmd_rbf", "fid_proxy"), default="sliced_wasserstein")
    e.add_argument("--projections", type=int, default=64)
    e.add_argument("--n", type=int, default=2000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--reference-seed", type=int)
    e.add_argument("--model", choices=("base", "ema"), default="ema")
    e.add_argument("--no-plot", action="store_true")
    e.add_argument("--out", default="eval")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnose", help="residual / edge / cond summaries and oracle self-test")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--pairs", type=int, default=32)
    d.add_argument("--batch", type=int, default=256)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--perfect", action="store_true", help="inject the true noise as the prediction")
    d.add_argument("--oracle-graphs", type=int, default=1000)
    d.set_defaults(func=cmd_diagnose)

    o = sub.add_parser("oracle", help="shortest distances on a step graph file")
    o.add_argument("--graph", required=True)
    o.add_argument("--order", choices=("topological", "random"), default="topological")
    o.add_argument("--seed", type=int, default=0)
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
