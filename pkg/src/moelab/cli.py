"""Command-line entry point.

Subcommands: rate-study, em-fit, gradcheck, gate-demo, fusion-demo,
encode-demo.  Exit codes: 0 success, 2 configuration error, 3 gradient
check failure, 4 missing polynomial-order table entry.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import fusion, gating, gmoe, harness, irregularity
from .config import DEFAULTS
from .harness import ConfigError, RateStudyConfig
from .voronoi import MissingRBarEntryError, loss_d1, loss_d2

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_GRADCHECK = 3
EXIT_RBAR = 4


# ---------------------------------------------------------------------------
# Config file: "key = value" lines mirroring RateStudyConfig fields.

_CONFIG_PARSERS = {
    "setting": str,
    "d": int,
    "k": int,
    "n_grid": lambda v: tuple(int(p) for p in v.split(",")),
    "replications": int,
    "base_seed": int,
    "perturb_std": float,
    "em_epsilon": float,
    "em_max_iter": int,
}


def load_config(path) -> dict:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_PARSERS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _CONFIG_PARSERS[key](raw.strip())
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return values


def _build_rate_config(args) -> RateStudyConfig:
    kwargs = {"setting": "exact"}
    if args.config:
        kwargs.update(load_config(args.config))
    flag_map = {
        "setting": args.setting,
        "d": args.d,
        "k": args.k,
        "replications": args.replications,
        "base_seed": args.seed,
        "perturb_std": args.perturb_std,
        "em_epsilon": args.em_epsilon,
        "em_max_iter": args.em_max_iter,
    }
    for key, value in flag_map.items():
        if value is not None:
            kwargs[key] = value
    if args.n_grid is not None:
        try:
            kwargs["n_grid"] = tuple(int(p) for p in args.n_grid.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad --n-grid: {exc}") from None
    elif args.paper_scale:
        kwargs["n_grid"] = harness.PAPER_N_GRID
    return RateStudyConfig(**kwargs)


def cmd_rate_study(args) -> int:
    cfg = _build_rate_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(rec):
        if not args.quiet:
            print(f"[{rec.setting}] n={rec.n} rep={rec.replication} "
                  f"loss={rec.loss:.4e} iters={rec.em_iterations}"
                  f"{'' if rec.converged else ' (not converged)'}",
                  file=sys.stderr)

    result = harness.run_rate_study(cfg, progress=progress)
    harness.write_records_csv(result.records, out / "records.csv")
    harness.write_slope_csv(result, out / "slope.csv")
    harness.write_means_csv(result, out / "means.csv")
    print(f"setting={cfg.setting} runs={len(result.records)} "
          f"slope={result.slope:.4f} intercept={result.intercept:.4f} "
          f"stderr={result.stderr:.4f}")
    print(f"wrote {out / 'records.csv'}, {out / 'slope.csv'}, {out / 'means.csv'}")
    return EXIT_OK


def cmd_em_fit(args) -> int:
    setting = args.setting or "exact"
    k = args.k if args.k is not None else (2 if setting == "exact" else 3)
    cfg = RateStudyConfig(setting=setting, d=args.d or 2, k=k,
                          n_grid=(max(args.n, 10),),
                          replications=1,
                          base_seed=args.seed or 0,
                          perturb_std=args.perturb_std if args.perturb_std is not None else 0.05,
                          em_epsilon=args.em_epsilon or 1e-6,
                          em_max_iter=args.em_max_iter or 2000)
    # Same stream derivation as rate-study (n, replication 0), so a single
    # fit reproduces the corresponding grid cell.
    g_star = gmoe.sample_true_measure(cfg.d, harness._run_seed(cfg.base_seed, 0))
    data = gmoe.sample_synthetic(g_star, args.n, harness._run_seed(cfg.base_seed, 1, args.n, 0, 0))
    init = gmoe.init_near_truth(g_star, cfg.k, cfg.perturb_std,
                                harness._run_seed(cfg.base_seed, 1, args.n, 0, 1))
    fitted, trace = gmoe.em_fit(data, cfg.k, init, epsilon=cfg.em_epsilon,
                                max_iter=cfg.em_max_iter)
    if setting == "exact":
        loss = loss_d1(fitted, g_star)
        loss_name = "voronoi_loss_exact"
    else:
        loss = loss_d2(fitted, g_star)
        loss_name = "voronoi_loss_over"
    print(f"n={args.n} k={cfg.k} d={cfg.d} seed={cfg.base_seed}")
    print(f"em_iterations={trace.n_iter} converged={trace.converged}")
    print(f"final_loglik={trace.loglik[-1]!r}")
    print(f"{loss_name}={loss!r}")
    if args.out:
        gmoe.save_measure(fitted, args.out)
        print(f"wrote fitted measure to {args.out}")
    if args.truth_out:
        gmoe.save_measure(g_star, args.truth_out)
        print(f"wrote true measure to {args.truth_out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    scopes = harness.GRADCHECK_SCOPES if args.scope == "all" else (args.scope,)
    failed = 0
    for scope in scopes:
        reports = harness.run_gradcheck(scope, n_instances=args.instances,
                                        tol=args.tol, seed=args.seed)
        worst = max(r.max_rel_err for r in reports)
        n_pass = sum(r.passed for r in reports)
        n_flagged = sum(r.flagged for r in reports)
        print(f"{scope}: {n_pass}/{len(reports)} passed, "
              f"max rel err {worst:.3e}, tie-boundary resamples {n_flagged}")
        for r in reports:
            if not r.passed:
                failed += 1
                print(f"  FAIL instance {r.instance}: {r.worst()} "
                      f"rel err {r.max_rel_err:.3e} > tol {r.tol:.1e}")
    return EXIT_GRADCHECK if failed else EXIT_OK


def cmd_gate_demo(args) -> int:
    rng = np.random.default_rng(args.seed)
    g = gating.GateParams(W=rng.normal(0.0, 1.0, size=(args.d, args.experts)),
                          kind=args.kind, K=args.top_k)
    x = rng.normal(0.0, 1.0, size=args.d)
    scores = gating.gate_scores(x, g)
    sw = gating.topk_gate(x, g)
    print(f"kind={args.kind} D={args.d} S={args.experts} K={args.top_k} seed={args.seed}")
    print("expert  score        weight")
    for s in range(args.experts):
        marker = "*" if s in sw.selected else " "
        print(f"  {s:>3}{marker}  {scores[s]: .5f}   {sw.weights[s]:.6f}")
    print(f"selected={sorted(int(i) for i in sw.selected)} "
          f"sum={sw.weights.sum()!r} nonzeros={int(np.count_nonzero(sw.weights))}")
    return EXIT_OK


def _stacked_fusion(batch, mode_kind, n_experts, top_k, group_k, hidden,
                    n_layers, rng):
    """Run a stack of fusion layers; per-modality outputs feed the next layer."""
    records_per_layer = []
    out_batch = batch
    for _ in range(n_layers):
        M, d_in_base = out_batch.n_modalities, out_batch.d_e
        if mode_kind == fusion.JOINT:
            mode = fusion.RouterMode(kind=fusion.JOINT)
            d_in = M * d_in_base
            gates = gating.GateParams(W=rng.normal(0.0, 1.0, size=(d_in, n_experts)),
                                      kind=gating.LAPLACE, K=top_k)
        elif mode_kind == fusion.PER_MODALITY:
            mode = fusion.RouterMode(kind=fusion.PER_MODALITY)
            d_in = d_in_base
            gates = [gating.GateParams(W=rng.normal(0.0, 1.0, size=(d_in, n_experts)),
                                       kind=gating.LAPLACE, K=top_k)
                     for _ in range(M)]
        else:
            groups = np.array_split(np.arange(n_experts), M)
            partition = [list(map(int, grp)) for grp in groups]
            k_eff = min(group_k, min(len(grp) for grp in partition))
            mode = fusion.RouterMode(kind=fusion.DISJOINT, partition=partition,
                                     group_top_k=k_eff)
            d_in = d_in_base
            gates = [gating.GateParams(W=rng.normal(0.0, 1.0, size=(d_in, len(grp))),
                                       kind=gating.LAPLACE, K=k_eff)
                     for grp in partition]
        experts = [fusion.ExpertParams.random(d_in, hidden, d_in_base, rng, scale=0.3)
                   for _ in range(n_experts)]
        result = fusion.route_and_fuse(out_batch, experts, gates, mode)
        records_per_layer.append(result.gate_records)
        out_batch = fusion.ModalityBatch(
            embeddings=result.outputs,
            present=np.ones(len(result.outputs), dtype=bool),
            modality_ids=[f"fused{j}" for j in range(len(result.outputs))],
        )
    return out_batch, records_per_layer


def cmd_fusion_demo(args) -> int:
    rng = np.random.default_rng(args.seed)
    M = args.modalities
    embeddings = [rng.normal(0.0, 1.0, size=(args.gamma, args.d_e)) for _ in range(M)]
    present = np.ones(M, dtype=bool)
    missing = []
    if args.missing:
        missing = [int(p) for p in args.missing.split(",")]
        for m in missing:
            present[m] = False
    batch = fusion.ModalityBatch(embeddings=embeddings, present=present,
                                 modality_ids=[f"m{j}" for j in range(M)])
    miss = fusion.MissingEmbedding.init(args.gamma, args.d_e, rng)
    batch = fusion.substitute_missing(batch, miss)

    out_batch, records_per_layer = _stacked_fusion(
        batch, args.mode, args.experts, args.top_k, args.group_top_k,
        args.hidden, args.layers, rng)

    print(f"mode={args.mode} modalities={M} missing={missing} "
          f"experts={args.experts} top_k={args.top_k} layers={args.layers}")
    for layer, records in enumerate(records_per_layer):
        ent = fusion.entropy_reg_loss(records)
        imp = fusion.importance_loss([w for rec in records for w in rec])
        print(f"layer {layer}: routers={len(records)} "
              f"entropy_loss={ent:.6f} importance_loss={imp:.6f}")
    for j, Z in enumerate(out_batch.embeddings):
        print(f"output {j}: shape={Z.shape} mean={Z.mean():.4f} std={Z.std():.4f}")
    return EXIT_OK


def cmd_encode_demo(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.series:
        series = irregularity.load_series(args.series)
        if series.n_channels == 0:
            raise ConfigError(f"{args.series} holds no observations")
    else:
        series = irregularity.IrregularSeries.random(
            args.channels, rng, t_max=args.t_max, max_len=10, allow_empty=True)
    if args.save_series:
        irregularity.save_series(series, args.save_series)
        print(f"wrote series to {args.save_series}")

    d_m = series.n_channels
    means = np.array([float(v.mean()) if v.size else 0.0
                      for v, _ in series.channels])
    bins = irregularity.default_bins(args.gamma, t_max=args.t_max)

    imp = irregularity.utde_impute(series, bins, means)
    params = irregularity.TimeEmbedParams.random(
        args.heads, args.d_h, d_m, d_m, rng, p=args.attention_dim, scale=0.1)
    emb = irregularity.mtand_discretize(series, bins, params, global_means=means)
    gate = irregularity.CombineGate.random(d_m, rng)
    combined = irregularity.utde_combine(imp, emb.Z, gate)

    lengths = [int(v.size) for v, _ in series.channels]
    print(f"channels={d_m} observations={lengths} gamma={args.gamma} "
          f"t_max={args.t_max} heads={args.heads} d_h={args.d_h}")
    attn = irregularity.mtand_attention(series, bins, params)
    row_sum_err = max(
        (float(np.abs(A.sum(axis=1) - 1.0).max())
         for per_channel in attn for A in per_channel if A is not None),
        default=0.0,
    )
    print(f"attention row-sum max deviation: {row_sum_err:.2e}")
    print(f"imputation embedding: shape={imp.shape}")
    print(f"attention embedding:  shape={emb.Z.shape}")
    print(f"gated combination:    shape={combined.shape}")
    with np.printoptions(precision=4, suppress=True):
        print("first bins (combined):")
        print(combined[: min(3, combined.shape[0])])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="Sparse MoE gating/fusion, irregular-series encoding, and "
                    "EM convergence-rate studies",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rate-study", help="run a seeded EM convergence-rate sweep")
    p.add_argument("--config", help="key = value file mirroring the study fields")
    p.add_argument("--setting", choices=harness.SETTINGS)
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--out", default="rate_out", help="output directory for CSVs")
    p.add_argument("--paper-scale", action="store_true",
                   help="10 sample sizes up to 1e5 instead of the desk grid")
    p.add_argument("--d", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--n-grid", help="comma-separated sample sizes")
    p.add_argument("--replications", type=int)
    p.add_argument("--perturb-std", type=float)
    p.add_argument("--em-epsilon", type=float)
    p.add_argument("--em-max-iter", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_rate_study)

    p = sub.add_parser("em-fit", help="one synthetic EM fit (a single grid cell)")
    p.add_argument("--setting", choices=harness.SETTINGS, default="exact")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--d", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb-std", type=float)
    p.add_argument("--em-epsilon", type=float)
    p.add_argument("--em-max-iter", type=int)
    p.add_argument("--out", help="write the fitted measure to this file")
    p.add_argument("--truth-out", help="write the true measure to this file")
    p.set_defaults(func=cmd_em_fit)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--scope", choices=harness.GRADCHECK_SCOPES + ("all",),
                   default="all")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gate-demo", help="print one sparse gate evaluation")
    p.add_argument("--kind", choices=gating.GATE_KINDS, default=gating.LAPLACE)
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--experts", type=int, default=DEFAULTS.n_experts)
    p.add_argument("--top-k", type=int, default=DEFAULTS.top_k)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gate_demo)

    p = sub.add_parser("fusion-demo", help="stacked MoE fusion on random modalities")
    p.add_argument("--mode", choices=fusion.ROUTER_MODES, default=fusion.JOINT)
    p.add_argument("--modalities", type=int, default=3)
    p.add_argument("--gamma", type=int, default=4)
    p.add_argument("--d-e", type=int, default=8)
    p.add_argument("--experts", type=int, default=DEFAULTS.n_experts)
    p.add_argument("--top-k", type=int, default=DEFAULTS.top_k)
    p.add_argument("--group-top-k", type=int, default=DEFAULTS.disjoint_top_k)
    p.add_argument("--hidden", type=int, default=DEFAULTS.ffn_hidden)
    p.add_argument("--layers", type=int, default=DEFAULTS.moe_layers)
    p.add_argument("--missing", help="comma-separated modality indices to drop")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fusion_demo)

    p = sub.add_parser("encode-demo", help="irregular series onto regular bins")
    p.add_argument("--series", help="input file with 'channel_id,time,value' lines")
    p.add_argument("--save-series", help="write the demo series to this file")
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--gamma", type=int, default=12)
    p.add_argument("--t-max", type=float, default=DEFAULTS.t_max_hours)
    p.add_argument("--heads", type=int, default=DEFAULTS.attention_heads)
    p.add_argument("--d-h", type=int, default=DEFAULTS.time_embed_dim)
    p.add_argument("--attention-dim", type=int, default=DEFAULTS.attention_dim)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_encode_demo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingRBarEntryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RBAR


if __name__ == "__main__":
    sys.exit(main())
