"""Command-line entry point: gen-data, train, eval, infer, bench.

Every command takes --config (plain-text key = value file) plus repeated
--set key=value overrides.  Exit codes: 0 success, 2 configuration error,
3 data error, 4 model file error, 1 anything else.
"""

import argparse
import sys

from .config import ConfigError, RunConfig
from .data import generate_synthetic, load_dataset, save_dataset
from .harness import (bench_network, bench_scan, evaluate, evaluate_two_stage,
                      format_bench, infer_image)
from .modelio import ModelFormatError, load_model, save_model
from .network import Network
from .train import train


def _load_config(args):
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.set:
        cfg = cfg.with_overrides(args.set)
    return cfg


def _load_network(path, expect_stage=None):
    spec, params, _ = load_model(path, expect_stage=expect_stage)
    return Network(spec, params={k: v.copy() for k, v in params.items()})


def cmd_gen_data(args):
    cfg = _load_config(args)
    records = generate_synthetic(cfg.synth_config())
    save_dataset(args.out, records, palette=cfg.vocabulary)
    print(f"wrote {len(records)} samples to {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    log_lines = []

    def progress(line):
        log_lines.append(line)
        print(line)

    net, _ = train(cfg, progress=progress)
    save_model(args.out, net.spec, net.params, cfg.to_text())
    if args.log:
        with open(args.log, "w") as fh:
            fh.write("\n".join(log_lines) + "\n")
    print(f"saved model to {args.out}")
    return 0


def _eval_records(args, net):
    if args.data:
        return load_dataset(args.data)
    cfg = _load_config(args)
    return generate_synthetic(cfg.synth_config())


def cmd_eval(args):
    net = _load_network(args.model)
    records = _eval_records(args, net)
    if args.component:
        if net.spec.stage != "1":
            raise ModelFormatError(f"{args.model}: two-stage eval needs a "
                                   f"stage-1 model here")
        comps = {}
        for spec_arg in args.component:
            kind, _, path = spec_arg.partition("=")
            if not path:
                raise ConfigError(f"--component expects kind=path, got {spec_arg!r}")
            comps[kind] = _load_network(path, expect_stage="2")
        report = evaluate_two_stage(net, comps, records, threads=args.threads)
    else:
        report = evaluate(net, records, threads=args.threads,
                          eval_at_256=args.at_256)
    print(report.format())
    return 0


def cmd_infer(args):
    net = _load_network(args.model)
    infer_image(net, args.image, args.out, gate_path=args.gate,
                threads=args.threads)
    print(f"wrote {args.out}")
    return 0


def cmd_bench(args):
    if args.scan:
        rep = bench_scan(size=args.size or 512, iterations=args.iterations)
        print(f"scan {rep['size']}x{rep['size']}: sequential "
              f"{rep['sequential_s']*1e3:.2f} ms, 4-thread "
              f"{rep['threaded_s']*1e3:.2f} ms, speedup {rep['speedup']:.2f}x")
        return 0
    if not args.model:
        raise ConfigError("bench: --model is required unless --scan is given")
    net = _load_network(args.model)
    single = bench_network(net, size=args.size, iterations=args.iterations,
                           threads=1)
    multi = bench_network(net, size=args.size, iterations=args.iterations,
                          threads=4)
    print("single-thread scans:")
    print(format_bench(single))
    print("4-thread scans:")
    print(format_bench(multi))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="svrn",
        description="Shallow-CNN + gated spatial RNN segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="plain-text key = value run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config field")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--log", help="write the epoch log here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on a dataset")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="dataset directory (default: config synth)")
    p.add_argument("--component", action="append", metavar="KIND=MODEL",
                   help="stage-2 component model (eye=..., nose=..., mouth=...)")
    p.add_argument("--at-256", action="store_true",
                   help="downscale predictions to 256x256 before scoring")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="parse one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="label map PNG")
    p.add_argument("--gate", help="also write the gate head as a grayscale PNG")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="measure inference latency")
    p.add_argument("--model")
    p.add_argument("--size", type=int, help="override input extent")
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--scan", action="store_true",
                   help="benchmark the directional scan kernels only")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except ModelFormatError as e:
        print(f"model error: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
