"""Command-line interface.

    latentshield gen-data --episodes 4000 --seed 100 --out data.asd
    latentshield train-projector --data data.asd --out proj.asnn
    latentshield solve-grid --epsilon 0.5 --out grid.asvg
    latentshield verify theorem1 --delta 0.2
    latentshield calibrate --data calib.asd --epsilon 0.5 --alpha 0.005 \
        --projector proj.asnn --out thr.txt
    latentshield calib-cache --projector proj.asnn --out cache.json
    latentshield train-filter --conditioning zz --projector proj.asnn \
        --data data.asd --out filter.asfn
    latentshield eval classify|rollout|ablation ...
    latentshield serve --port 8700 --nets filter.asfn --projector proj.asnn \
        --calib-cache cache.json [--grid grid.asvg]

Every command accepts --config FILE (key = value lines) and repeated
--set key=value overrides; see config.RunConfig for the knobs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import conformal, dubins, evaluation, grid as grid_mod, latent, nets, safety_rl
from .config import RunConfig, load_config
from .pipeline import Pipeline


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry")
    p.add_argument("--artifacts", help="artifact cache directory")


def _config_from(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        key, _, val = item.partition("=")
        if not val:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = val.strip()
    return load_config(args.config, overrides)


def cmd_gen_data(args) -> int:
    cfg = _config_from(args)
    params = cfg.dubins_params()
    if args.horizon is not None:
        from dataclasses import replace
        params = replace(params, horizon=args.horizon)
    data = dubins.generate_dataset(args.episodes, params, args.seed)
    dubins.save_dataset(data, args.out)
    steps = sum(len(t.actions) for t in data)
    print(f"wrote {len(data)} episodes ({steps} steps) to {args.out}")
    return 0


def cmd_train_projector(args) -> int:
    cfg = _config_from(args)
    data = dubins.load_dataset(args.data)
    enc = latent.Encoder(d_z=cfg.latent_dim, bound=cfg.bound, seed=cfg.encoder_seed)
    proj, rep = latent.train_projector(
        data, enc, pair_count=args.pairs or cfg.projector_pairs,
        epochs=args.epochs or cfg.projector_epochs, lr=cfg.projector_lr,
        lr_final=cfg.projector_lr_final, weight_decay=cfg.projector_weight_decay,
        seed=args.seed if args.seed is not None else cfg.projector_seed)
    nets.save_net(proj, args.out)
    print(f"projector -> {args.out}  train_mse={rep.train_mse:.4f} "
          f"holdout_mse={rep.holdout_mse:.4f}")
    return 0


def cmd_solve_grid(args) -> int:
    cfg = _config_from(args)
    spec = grid_mod.GridSpec(nx=args.nx or cfg.grid_nx, ny=args.ny or cfg.grid_ny,
                             ntheta=args.ntheta or cfg.grid_ntheta, bound=cfg.bound,
                             n_actions=args.nactions or cfg.grid_actions)
    disc = dubins.FailureDisc(0.0, 0.0, args.epsilon or cfg.epsilon)
    g = grid_mod.solve_disc_grid(disc, cfg.dubins_params(), spec,
                                 gamma=args.gamma or cfg.grid_gamma,
                                 tol=args.tol or cfg.grid_tol,
                                 max_iter=cfg.grid_max_iter)
    grid_mod.save_grid(g, args.out)
    print(f"grid -> {args.out}  iterations={g.iterations} residual={g.residual:.2e} "
          f"converged={g.converged}")
    return 0 if g.converged else 1


def cmd_verify(args) -> int:
    cfg = _config_from(args)
    if args.what != "theorem1":
        raise SystemExit("only 'theorem1' verification is available")
    spec = grid_mod.GridSpec(nx=args.nx, ny=args.ny, ntheta=args.ntheta,
                             bound=cfg.bound, n_actions=cfg.grid_actions)
    disc = dubins.FailureDisc(0.0, 0.0, args.epsilon)
    rep = grid_mod.verify_theorem1(grid_mod.disc_margin_fn(disc), args.delta,
                                   cfg.dubins_params(), spec, gamma=args.gamma,
                                   tol=cfg.grid_tol, max_iter=cfg.grid_max_iter)
    print(f"max |V_delta - (V - delta)| = {rep.max_abs_diff:.3e}")
    print(f"sublevel symmetric difference off band: {rep.sublevel_mismatch} nodes "
          f"(band {rep.band_nodes})")
    print(f"iterations: {rep.iterations}, runtime {rep.runtime_s:.1f}s")
    ok = rep.max_abs_diff < 1e-5 and rep.sublevel_mismatch == 0
    print("OK" if ok else "FAILED")
    return 0 if ok else 1


def cmd_calibrate(args) -> int:
    cfg = _config_from(args)
    data = dubins.load_dataset(args.data)
    enc = latent.Encoder(d_z=cfg.latent_dim, bound=cfg.bound, seed=cfg.encoder_seed)
    proj = nets.load_net(args.projector) if args.projector else None
    calib = conformal.build_calibration_set(data, enc, args.pairs or cfg.calib_pairs,
                                            args.epsilon, seed=args.seed)
    t = conformal.calibrate(calib, proj, args.alpha, use_projector=proj is not None,
                            runtime_margin=cfg.runtime_margin)
    conformal.save_threshold(t, args.out)
    print(f"threshold -> {args.out}  delta={t.delta:.4f} n_positive={t.n_positive}")
    return 0


def cmd_calib_cache(args) -> int:
    cfg = _config_from(args)
    pipe = Pipeline(cfg, root=args.artifacts)
    proj = nets.load_net(args.projector) if args.projector else pipe.projector()[0]
    sets = [pipe.calibration_set(eps) for eps in cfg.epsilons]
    cache = conformal.build_score_cache(sets, proj, runtime_margin=cfg.runtime_margin)
    conformal.save_score_cache(cache, args.out)
    print(f"score cache -> {args.out}  epsilons={cache.epsilons()}")
    return 0


def cmd_train_filter(args) -> int:
    cfg = _config_from(args)
    data = dubins.load_dataset(args.data)
    enc = latent.Encoder(d_z=cfg.latent_dim, bound=cfg.bound, seed=cfg.encoder_seed)
    use_proj = not args.raw_margin
    proj = nets.load_net(args.projector) if use_proj else None
    pipe = Pipeline(cfg, root=args.artifacts)
    tc = pipe.train_config(args.conditioning, use_projector=use_proj, steps=args.steps)
    if args.seed is not None:
        from dataclasses import replace
        tc = replace(tc, seed=args.seed)
    result = safety_rl.train_filter(tc, data, enc, cfg.dubins_params(), proj)
    safety_rl.save_filter_nets(result.nets, args.out)
    print(f"filter -> {args.out}  steps={result.steps} wall={result.wall_s:.0f}s")
    return 0


def _eval_pieces(args, cfg: RunConfig):
    pipe = Pipeline(cfg, root=args.artifacts)
    enc = pipe.encoder()
    if args.nets:
        fn = safety_rl.load_filter_nets(args.nets)
        proj = nets.load_net(args.projector) if args.projector else None
    else:
        fn = pipe.filter_nets("zz")
        proj = pipe.projector()[0]
    grid = grid_mod.load_grid(args.grid) if args.grid else pipe.oracle_grid(cfg.epsilon)
    t = (conformal.load_threshold(args.threshold) if args.threshold
         else pipe.threshold(cfg.epsilon))
    return pipe, enc, fn, proj, grid, t


def cmd_eval(args) -> int:
    cfg = _config_from(args)
    if args.what == "ablation":
        pipe = Pipeline(cfg, root=args.artifacts)
        rows = evaluation.run_ablation(pipe, args.suite,
                                       n_constraints=args.constraints,
                                       n_rollouts=args.n, seed=args.seed)
    else:
        pipe, enc, fn, proj, grid, t = _eval_pieces(args, cfg)
        if args.what == "classify":
            rep = evaluation.eval_classification(
                fn, proj, t, grid, enc,
                n_constraints=args.constraints or cfg.eval_constraints,
                seed=args.seed if args.seed is not None else cfg.eval_seed,
                dont_care_band=cfg.dont_care_band)
            metrics = rep.metrics()
        else:
            rep = evaluation.eval_safe_rate(
                fn, proj, grid, enc, cfg.dubins_params(),
                n=args.n or cfg.eval_rollouts,
                seed=args.seed if args.seed is not None else cfg.eval_seed)
            metrics = rep.metrics()
        metrics["delta"] = t.delta
        rows = [(args.what, metrics)]
    text = evaluation.emit_report(rows)
    print(text, end="")
    if args.out:
        evaluation.write_report(rows, args.out, fmt=args.format)
        print(f"report -> {args.out}")
    return 0


def cmd_serve(args) -> int:
    from .server import load_assets, run_server

    cfg = _config_from(args)
    assets = load_assets(args.nets, args.projector, args.calib_cache,
                         grid_path=args.grid, cfg=cfg)
    run_server(assets, host=args.host, port=args.port, tcp_port=args.tcp_port,
               static_dir=args.static)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="latentshield", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a trajectory dataset")
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--horizon", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-projector", help="train the failure projector")
    p.add_argument("--data", required=True)
    p.add_argument("--pairs", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train_projector)

    p = sub.add_parser("solve-grid", help="solve the ground-truth value grid")
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--ntheta", type=int)
    p.add_argument("--nactions", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_solve_grid)

    p = sub.add_parser("verify", help="verify solver identities")
    p.add_argument("what", choices=["theorem1"])
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--nx", type=int, default=41)
    p.add_argument("--ny", type=int, default=41)
    p.add_argument("--ntheta", type=int, default=41)
    p.add_argument("--gamma", type=float, default=0.999)
    p.add_argument("--epsilon", type=float, default=0.5)
    _add_common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("calibrate", help="conformal threshold calibration")
    p.add_argument("--data", required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--projector")
    p.add_argument("--pairs", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("calib-cache", help="write the per-epsilon score cache")
    p.add_argument("--projector")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_calib_cache)

    p = sub.add_parser("train-filter", help="train the safety critic/actor")
    p.add_argument("--conditioning", choices=list(safety_rl.STRATEGIES), default="zz")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--projector")
    p.add_argument("--raw-margin", action="store_true",
                   help="raw-latent cosine margins (no projector)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train_filter)

    p = sub.add_parser("eval", help="classification / rollout / ablation reports")
    p.add_argument("what", choices=["classify", "rollout", "ablation"])
    p.add_argument("--suite", choices=list(evaluation.ABLATION_SUITES), default="table1")
    p.add_argument("--constraints", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--nets")
    p.add_argument("--projector")
    p.add_argument("--threshold")
    p.add_argument("--grid")
    p.add_argument("--out")
    p.add_argument("--format", choices=["text", "json"], default="text")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the teleoperation service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8700)
    p.add_argument("--tcp-port", type=int)
    p.add_argument("--nets", required=True)
    p.add_argument("--projector")
    p.add_argument("--calib-cache", required=True)
    p.add_argument("--grid")
    p.add_argument("--static", help="serve this directory at / (UI build)")
    _add_common(p)
    p.set_defaults(func=cmd_serve)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
