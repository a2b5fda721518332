"""Command-line entry point: ``finealign {eval,compare,align,train,selftest}``.

Exit codes: 0 ok, 1 selftest failure, 2 usage or file error, 3 dimension or
item-count mismatch, 4 pair index out of range.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .core import l2_normalize
from .errors import DimMismatch, EmbeddingFileError, ZeroVector
from .harness import CorpusSpec, DistillConfig, TrainConfig, generate_corpus, train_toy
from .io import dump_alignment, load_embeddings
from .metrics import retrieval_report
from .strategies import STRATEGY_NAMES, StrategyConfig, score_matrices
from .transport import TransportConfig

log = logging.getLogger("finealign")

EXIT_FILE = 2
EXIT_DIM = 3
EXIT_RANGE = 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"--ks expects comma-separated integers, got {text!r}")
    if not ks or any(k < 1 for k in ks):
        raise argparse.ArgumentTypeError("--ks needs at least one positive integer")
    return ks


def _strategy_name(text: str) -> str:
    name = text.strip().lower().replace("_", "-")
    if name not in STRATEGY_NAMES:
        raise argparse.ArgumentTypeError(f"unknown strategy {text!r}; choose from {', '.join(STRATEGY_NAMES)}")
    return name


def _strategy_list(text: str) -> list[str]:
    return [_strategy_name(s) for s in text.split(",") if s.strip()]


def _unit_interval(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {v}")
    return v


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive value, got {v}")
    return v


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker threads for the score matrix")
    p.add_argument("--config", help="flat key=value file providing defaults for these flags")
    p.add_argument("-v", "--verbose", action="store_true", help="diagnostics on stderr")


def _add_strategy(p: argparse.ArgumentParser, many: bool = False) -> None:
    if many:
        p.add_argument("--strategies", type=_strategy_list, default=["uniform", "max-avg", "scan", "tokenflow"])
    else:
        p.add_argument("--strategy", type=_strategy_name, default="tokenflow")
    p.add_argument("--lambda", dest="lam", type=_positive, default=4.0, help="softmax inverse temperature")
    p.add_argument("--blend", type=_unit_interval, default=None, help="weight of the global similarity")
    p.add_argument("--epsilon", type=_positive, default=0.05, help="entropic regularization for emd")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="finealign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="retrieval report in both directions")
    p.add_argument("visual_file")
    p.add_argument("text_file")
    _add_strategy(p)
    p.add_argument("--ks", type=_ks, default=(1, 5, 10))
    _add_common(p)

    p = sub.add_parser("compare", help="one retrieval row per strategy")
    p.add_argument("visual_file")
    p.add_argument("text_file")
    _add_strategy(p, many=True)
    p.add_argument("--ks", type=_ks, default=(1, 5, 10))
    _add_common(p)

    p = sub.add_parser("align", help="alignment dump for one pair")
    p.add_argument("visual_file")
    p.add_argument("text_file")
    p.add_argument("--pair", type=int, nargs=2, metavar=("I", "J"), default=(0, 0))
    _add_strategy(p)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--out", help="write the dump here instead of stdout")
    _add_common(p)

    p = sub.add_parser("train", help="toy training on a synthetic corpus")
    p.add_argument("--n-pairs", type=int, default=64)
    p.add_argument("--tokens-per-item", type=int, default=4)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--concepts", type=int, default=32)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--no-collision", action="store_true")
    _add_strategy(p)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--param-mode", choices=("embedding-direct", "linear-projection"), default="linear-projection")
    p.add_argument("--blend-mode", choices=("similarity", "loss"), default="similarity")
    p.add_argument("--logit-scale", type=_positive, default=100.0)
    p.add_argument("--md", action="store_true", help="enable momentum distillation")
    p.add_argument("--ema-momentum", type=_unit_interval, default=0.95)
    p.add_argument("--target-alpha", type=_unit_interval, default=0.4)
    p.add_argument("--queue-len", type=int, default=16)
    _add_common(p)

    sub.add_parser("selftest", help="run the built-in invariant checks")
    return parser


def read_config(path: str) -> dict[str, str]:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected key=value", EXIT_FILE)
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse argv; a --config file supplies defaults that explicit flags override."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    aliases = {"lambda": "lam"}
    try:
        entries = read_config(args.config)
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}", EXIT_FILE)
    defaults = {}
    for key, value in entries.items():
        dest = aliases.get(key, key)
        action = actions.get(dest)
        if action is None or action.option_strings == []:
            raise CliError(f"unknown config key {key!r} for '{args.command}'", EXIT_FILE)
        if action.nargs == 0:
            defaults[dest] = value.lower() in ("1", "true", "yes", "on")
        elif action.nargs is not None:
            defaults[dest] = [action.type(v) if action.type else v for v in value.split()]
        else:
            try:
                defaults[dest] = action.type(value) if action.type else value
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise CliError(f"config key {key!r}: {exc}", EXIT_FILE)
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _strategy_config(args, name=None) -> StrategyConfig:
    return StrategyConfig(
        kind=name or args.strategy,
        lam=args.lam,
        global_blend_w=args.blend,
        transport=TransportConfig(epsilon=args.epsilon),
    )


def _load_pair(args):
    try:
        visual = load_embeddings(args.visual_file)
        text = load_embeddings(args.text_file)
        visual = [l2_normalize(v) for v in visual]
        text = [l2_normalize(t) for t in text]
    except (OSError, EmbeddingFileError, ZeroVector) as exc:
        raise CliError(f"cannot load embeddings: {exc}", EXIT_FILE)
    if len(visual) != len(text):
        raise CliError(f"item counts differ: {len(visual)} visual vs {len(text)} text", EXIT_DIM)
    dims = {ts.dim for ts in visual} | {ts.dim for ts in text}
    if len(dims) != 1:
        raise CliError(f"embedding dims differ: {sorted(dims)}", EXIT_DIM)
    return visual, text


def _reports(visual, text, cfg, ks, threads):
    sm = score_matrices(visual, text, cfg, threads)
    return retrieval_report(sm.s_t.T, None, ks), retrieval_report(sm.s_v, None, ks)


def cmd_eval(args, out) -> int:
    visual, text = _load_pair(args)
    cfg = _strategy_config(args)
    log.info("scoring %d x %d pairs with %s", len(visual), len(text), cfg.name)
    t2v, v2t = _reports(visual, text, cfg, args.ks, args.threads)
    out.write(f"t2v {t2v.serialize()}\n")
    out.write(f"v2t {v2t.serialize()}\n")
    return 0


def cmd_compare(args, out) -> int:
    visual, text = _load_pair(args)
    rows = []
    for name in args.strategies:
        log.info("strategy %s", name)
        rows.append((name, *_reports(visual, text, _strategy_config(args, name), args.ks, args.threads)))
    ks = sorted(set(args.ks))
    cols = [f"R@{k}" for k in ks] + ["MdR", "MnR"]
    header = ["strategy"] + [f"t2v:{c}" for c in cols] + [f"v2t:{c}" for c in cols]
    out.write("\t".join(header) + "\n")
    for name, t2v, v2t in rows:
        cells = [name]
        for rep in (t2v, v2t):
            cells += [f"{rep.r_at[k]:.1f}" for k in ks] + [f"{rep.mdr:.1f}", f"{rep.mnr:.1f}"]
        out.write("\t".join(cells) + "\n")
    return 0


def cmd_align(args, out) -> int:
    visual, text = _load_pair(args)
    i, j = args.pair
    if not (0 <= i < len(visual) and 0 <= j < len(text)):
        raise CliError(f"pair ({i}, {j}) out of range for {len(visual)} x {len(text)} items", EXIT_RANGE)
    cfg = _strategy_config(args)
    if args.out:
        dump_alignment(visual[i], text[j], cfg, args.out, args.top_k, (i, j))
    else:
        dump_alignment(visual[i], text[j], cfg, out, args.top_k, (i, j))
    return 0


def cmd_train(args, out) -> int:
    spec = CorpusSpec(
        n_pairs=args.n_pairs,
        tokens_per_item=args.tokens_per_item,
        dim=args.dim,
        concept_count=args.concepts,
        noise_sigma=args.sigma,
        collision_mode=not args.no_collision,
        seed=args.seed,
    )
    md = DistillConfig(args.ema_momentum, args.target_alpha, args.queue_len) if args.md else None
    cfg = TrainConfig(
        strategy=_strategy_config(args),
        steps=args.steps,
        lr=args.lr,
        batch=args.batch,
        md=md,
        param_mode=args.param_mode,
        logit_scale=args.logit_scale,
        blend_mode=args.blend_mode,
        seed=args.seed,
    )
    trace = train_toy(cfg, generate_corpus(spec))
    out.write(trace.to_jsonl())
    return 0


def cmd_selftest(args, out) -> int:
    from .selftest import run

    return 0 if run(out) else 1


COMMANDS = {
    "eval": cmd_eval,
    "compare": cmd_compare,
    "align": cmd_align,
    "train": cmd_train,
    "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(
            level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
            stream=sys.stderr,
            format="%(levelname)s %(message)s",
        )
        return COMMANDS[args.command](args, out)
    except CliError as exc:
        print(f"finealign: {exc}", file=sys.stderr)
        return exc.code
    except DimMismatch as exc:
        print(f"finealign: {exc}", file=sys.stderr)
        return EXIT_DIM
    except ValueError as exc:
        print(f"finealign: {exc}", file=sys.stderr)
        return EXIT_FILE


if __name__ == "__main__":
    sys.exit(main())
