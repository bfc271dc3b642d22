"""Command line entry point.

Exit codes: 0 success, 1 validation failure, 2 I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import checkpoint
from .argn import HEAD_MODES, OPTIMIZERS, ArchConfig, TrainConfig, predict, train_policy
from .gmm import em_fit, refine
from .gss import ClientError, GssError, RemoteVlmClient, SceneManifest, SessionConfig, Skill, load_rules, simulate_scene
from .harness import (
    WKV_PATCH_COUNTS,
    SceneSpec,
    evaluate_policy,
    generate_dataset,
    load_dataset,
    load_image,
    network_grad_check,
    save_dataset,
    wkv_check,
)
from .numerics import NumericalError

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
GRAD_TOL = 1e-4
WKV_TOL = 1e-10

log = logging.getLogger("rgmp")


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation failures, not I/O errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen_data(args) -> int:
    spec = SceneSpec(width=args.size, height=args.size, seed=args.seed, layout=args.layout, jitter=args.jitter)
    ds = generate_dataset(args.n, spec, Skill(args.skill))
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} demonstrations to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    h, w = ds.images[0].shape[:2]
    arch = ArchConfig(widths=args.widths, patch=args.patch, head=args.head, image_size=(h, w))
    cfg = TrainConfig(
        epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed, momentum=args.momentum,
        optimizer=args.optimizer, arch=arch,
    )

    def report(epoch, loss, _model):
        if args.verbose or epoch == cfg.epochs - 1:
            print(f"epoch {epoch + 1}/{cfg.epochs} loss {loss:.6g}", file=sys.stderr)

    result = train_policy(ds.images, ds.labels, cfg, callback=report)
    checkpoint.save_model(args.out, result.model, {
        "skill": ds.skill.value,
        "train": {"epochs": cfg.epochs, "lr": cfg.lr, "batch_size": cfg.batch_size, "seed": cfg.seed, "momentum": cfg.momentum,
                  "optimizer": cfg.optimizer},
        "losses": result.losses,
    })
    print(f"final loss {result.losses[-1]:.6g} (initial epoch {result.losses[0]:.6g}); saved {args.out}")
    return EXIT_OK


def cmd_fit_gmm(args) -> int:
    ds = load_dataset(args.data)
    theta, trace = em_fit(ds.labels, k=args.k, seed=args.seed, ridge=args.ridge, tol=args.tol, max_iter=args.max_iter)
    checkpoint.save_gmm(args.out, theta, {"skill": ds.skill.value, "iterations": len(trace), "loglik": trace[-1]})
    print(f"EM stopped after {len(trace)} iterations, mean log-likelihood {trace[-1]:.6g}; saved {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = checkpoint.load_model(args.model)
    theta = checkpoint.load_gmm(args.gmm)[0] if args.gmm else None
    ds = load_dataset(args.data)
    metrics = evaluate_policy(model, theta, ds, mode=args.mode, tol=args.tol, acc_s=args.acc_s)
    _print_json(metrics.to_dict())
    return EXIT_OK


def cmd_infer(args) -> int:
    model, _ = checkpoint.load_model(args.model)
    theta, _ = checkpoint.load_gmm(args.gmm)
    image = load_image(args.image)
    a_in = predict(model, image)
    a_star = refine(a_in, theta, args.mode)
    print(" ".join(f"{v:.6f}" for v in a_star))
    return EXIT_OK


def cmd_wkv_check(args) -> int:
    seeds = range(args.seed, args.seed + args.seeds)
    worst = 0.0
    for n in args.patches:
        gap = max(wkv_check(s, n) for s in seeds)
        worst = max(worst, gap)
        print(f"patches {n:3d}: max relative gap {gap:.3e}")
    ok = worst < WKV_TOL
    print(f"{'PASS' if ok else 'FAIL'} worst {worst:.3e} (tolerance {WKV_TOL:g})")
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_gss_sim(args) -> int:
    manifest = SceneManifest.load(args.scene)
    session = SessionConfig(max_rounds=args.rounds, client=args.client)
    client = RemoteVlmClient() if args.client == "remote" else None
    rules = load_rules(args.rules) if args.rules else None
    decision = simulate_scene(manifest, args.instruction, client, session, rules)
    _print_json(decision.to_dict())
    return EXIT_OK


def cmd_grad_check(args) -> int:
    arch = ArchConfig(widths=args.widths, patch=args.patch)
    report = network_grad_check(args.seed, size=args.size, arch=arch, eps=args.eps)
    for name, err in report.max_rel_error.items():
        flag = "" if err < GRAD_TOL else "  <-- above tolerance"
        print(f"{name:40s} {err:.3e}{flag}")
    ok = report.passed(GRAD_TOL)
    print(f"{'PASS' if ok else 'FAIL'} worst {report.worst:.3e} (tolerance {GRAD_TOL:g}, eps {args.eps:g})")
    return EXIT_OK if ok else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rgmp", description="Spatial-memory visuomotor policy toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic demonstration set")
    p.add_argument("--n", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--skill", choices=[s.value for s in Skill], default=Skill.SIDE_GRASP.value)
    p.add_argument("--layout", choices=["slots", "uniform"], default="slots")
    p.add_argument("--jitter", type=float, default=0.0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a policy checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=int, default=ArchConfig.patch)
    p.add_argument("--widths", type=_int_list, default=ArchConfig.widths)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--momentum", type=float, default=TrainConfig.momentum)
    p.add_argument("--optimizer", choices=OPTIMIZERS, default=TrainConfig.optimizer)
    p.add_argument("--head", choices=HEAD_MODES, default=ArchConfig.head)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit-gmm", help="fit the joint-space mixture by EM")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ridge", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_gmm)

    p = sub.add_parser("eval", help="score a policy on held-out scenes")
    p.add_argument("--model", required=True)
    p.add_argument("--gmm")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["nearest", "aggregate"], default="nearest")
    p.add_argument("--tol", type=float, default=0.05)
    p.add_argument("--acc-s", type=float, default=1.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="refined joint angles for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--gmm", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mode", choices=["nearest", "aggregate"], default="nearest")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("wkv-check", help="compare the recursive scan with the unrolled sum")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--patches", type=_int_list, default=WKV_PATCH_COUNTS)
    p.set_defaults(func=cmd_wkv_check)

    p = sub.add_parser("gss-sim", help="run the skill selector on a scene manifest")
    p.add_argument("--scene", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--client", choices=["mock", "remote"], default="mock")
    p.add_argument("--rules")
    p.add_argument("--rounds", type=int, default=3)
    p.set_defaults(func=cmd_gss_sim)

    p = sub.add_parser("grad-check", help="finite-difference check of the whole network")
    p.add_argument("--seed", type=int, default=2)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--widths", type=_int_list, default=(4, 8, 8))
    p.add_argument("--patch", type=int, default=2)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, checkpoint.CheckpointError, ClientError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, GssError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
