"""Command-line entry point: one subcommand per pipeline stage."""
import argparse
import contextlib
import os
import sys

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_DATA = 5

THREADS_ENV = "PROGNOSISEX_THREADS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


def _feature(text):
    try:
        n, m = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected n,m, got {text!r}") from None
    return n, m


def _override(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser():
    p = _Parser(prog="prognosisex", description="Explainable prognosis pipeline on diffusion-autoencoder latents.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def stage(name, help, out_default="run"):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--profile", choices=["desk", "paper-ref"], default=None)
        sp.add_argument("--set", dest="overrides", type=_override, action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int, help="master seed (overrides config)")
        sp.add_argument("--out", default=out_default, help="output directory")
        return sp

    def with_data(sp):
        sp.add_argument("--data", default="data", help="data directory or its manifest.csv")
        return sp

    def with_ae(sp):
        sp.add_argument("--checkpoint", help="autoencoder checkpoint (default <out>/ae.pgxc)")
        return sp

    def with_head(sp):
        sp.add_argument("--head", help="head checkpoint (default <out>/head.pgxc)")
        sp.add_argument("--latents", help="cached latents (default <out>/latents.pgxc if present)")
        return sp

    stage("gen-data", "generate the synthetic dataset", out_default="data")
    with_data(stage("train-ae", "train the diffusion autoencoder"))
    sp = with_ae(with_data(stage("reconstruct", "encode and decode slices")))
    sp.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    sp.add_argument("--cases", nargs="+", help="restrict to these case ids")
    with_ae(with_data(stage("train-head", "encode cases and train the prognostic head")))
    sp = with_head(with_ae(with_data(stage("eval", "score a split"))))
    sp.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    sp = with_head(with_ae(with_data(stage("reason", "reasoning-space analysis"))))
    sp.add_argument("--split", default="all", choices=["train", "val", "test", "all"])
    sp.add_argument("--rho", type=float, help="relative threshold for class-specific features")
    sp = with_head(with_ae(with_data(stage("counterfactual", "latent counterfactual panels"))))
    sp.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    pick = sp.add_mutually_exclusive_group()
    pick.add_argument("--feature", type=_feature, metavar="N,M", help="feature to manipulate")
    pick.add_argument("--auto", action="store_true", help="use the identified class-specific features")
    sp.add_argument("--class", dest="cls", type=int, default=1)
    sp.add_argument("--direction", choices=["enhance", "mitigate", "both"], default="both")
    sp.add_argument("--alpha-sigma", type=float, help="step size in cohort standard deviations")
    sp.add_argument("--cases", nargs="+", help="case ids (default: first --n-cases of the split)")
    sp.add_argument("--n-cases", type=int, default=5)
    sp.add_argument("--reasoning", help="directory holding class_specific.csv (default <out>)")
    return p


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(value))


def _dispatch(args, cfg):
    from . import pipeline as P
    out = args.out
    ae = getattr(args, "checkpoint", None) or os.path.join(out, "ae.pgxc")
    head = getattr(args, "head", None) or os.path.join(out, "head.pgxc")
    latents = getattr(args, "latents", None) or os.path.join(out, "latents.pgxc")
    cmd = args.command
    if cmd == "gen-data":
        m = P.gen_data(cfg, out)
        print(f"wrote {len(m)} cases to {out}")
    elif cmd == "train-ae":
        P.train_ae(cfg, args.data, out, verbose=True)
        print(f"wrote {os.path.join(out, 'ae.pgxc')}")
    elif cmd == "reconstruct":
        err = P.reconstruct(cfg, args.data, ae, out, args.split, args.cases)
        print(f"mean L1 {err:.4f}")
    elif cmd == "train-head":
        h = P.train_head(cfg, args.data, ae, out)
        print(f"best val AUC {h.best_val_auc_:.4f} at epoch {h.best_epoch_}")
    elif cmd == "eval":
        r = P.evaluate(cfg, args.data, ae, head, out, args.split, latents)
        print(" ".join(f"{k}={v:.4f}" for k, v in r.as_row().items()))
    elif cmd == "reason":
        _, sets = P.reason(cfg, args.data, ae, head, out, args.split, args.rho, latents)
        for s in sets:
            print(f"class {s.c}: {s.features}")
    elif cmd == "counterfactual":
        directions = ("enhance", "mitigate") if args.direction == "both" else (args.direction,)
        res = P.counterfactual(cfg, args.data, ae, head, out, cls=args.cls, feature=args.feature,
                               auto=args.auto, directions=directions, alpha_sigma=args.alpha_sigma,
                               case_ids=args.cases, n_cases=args.n_cases, split=args.split,
                               reasoning_dir=args.reasoning, latents_path=latents)
        print(f"wrote {len(res)} counterfactuals to {out}")


def run(argv=None):
    from .checkpoint import CheckpointError
    from .config import ConfigError, load
    from .data import DataError
    from .pgm import ImageFormatError
    from .pipeline import MissingInputError

    try:
        args = build_parser().parse_args(argv)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:          # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        overrides = dict(args.overrides)
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load(args.config, args.profile, overrides)
    except FileNotFoundError as e:
        print(f"config: {e}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as e:
        print(f"config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with _thread_limit():
            _dispatch(args, cfg)
    except (MissingInputError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (DataError, ImageFormatError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


def main():
    sys.exit(run())
