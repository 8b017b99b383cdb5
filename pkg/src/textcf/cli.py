from __future__ import annotations

import argparse
import logging
import sys

from textcf.data import DATASETS, ExampleRecord, preprocess, split_pair
from textcf.errors import TextCFError
from textcf.harness import METHODS, ExperimentConfig, ModelFactory, generate, inapplicable_reason, rebuild_reports, run_experiment


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="textcf", description="Counterfactual explanation benchmark for text classifiers")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML or JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output-dir")
        sp.add_argument("--backend", choices=("hf", "toy"))
        sp.add_argument("--mock-llm", action="store_true", help="replay LLM responses from cache/fixtures only")
        sp.add_argument("-v", "--verbose", action="store_true")

    run = sub.add_parser("run", help="run the dataset x method grid")
    common(run)
    run.add_argument("--dataset", action="append", choices=DATASETS)
    run.add_argument("--method", action="append", choices=METHODS)
    run.add_argument("--n-samples", type=int)
    run.add_argument("--workers", type=int)

    rep = sub.add_parser("report", help="re-render reports, table and figure from persisted results")
    rep.add_argument("--output-dir", required=True)

    single = sub.add_parser("single", help="explain one input with one method")
    common(single)
    single.add_argument("--method", required=True, choices=METHODS)
    single.add_argument("--dataset", default="sst2", choices=DATASETS)
    single.add_argument("--text", required=True, help='input text; QNLI pairs as "question [SEP] sentence"')
    return p


def _config(args) -> ExperimentConfig:
    overrides = {
        "seed": args.seed,
        "output_dir": args.output_dir,
        "backend": args.backend,
        "mock_llm": True if args.mock_llm else None,
        "datasets": getattr(args, "dataset", None),
        "methods": getattr(args, "method", None),
        "n_samples": getattr(args, "n_samples", None),
        "workers": getattr(args, "workers", None),
    }
    if args.config:
        return ExperimentConfig.from_file(args.config, **overrides)
    return ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    console = logging.StreamHandler()
    console.setLevel(logging.INFO if getattr(args, "verbose", False) else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.basicConfig(level=logging.INFO, handlers=[console])
    try:
        if args.command == "report":
            art = rebuild_reports(args.output_dir)
            print(art.table.read_text(encoding="utf-8"), end="")
            return 0
        if args.command == "single":
            dataset = args.dataset
            args.dataset, args.method = [dataset], [args.method]
            config = _config(args)
            text = preprocess(args.text)
            if dataset == "qnli":
                q, s = split_pair(text)
                example = ExampleRecord("cli-0", dataset, 0, question=q, sentence=s)
            else:
                example = ExampleRecord("cli-0", dataset, 0, text=text)
            ctx = ModelFactory(config).context(dataset)
            reason = inapplicable_reason(config.methods[0], ctx)
            if reason:
                print(f"error: {config.methods[0]} cannot run: {reason}", file=sys.stderr)
                return 1
            result = generate(config.methods[0], example, ctx)
            if result.counterfactual_text is None:
                print(f"no counterfactual ({result.failure_reason})", file=sys.stderr)
                return 1
            print(result.counterfactual_text)
            if not result.flipped:
                print(f"note: label not flipped ({result.failure_reason})", file=sys.stderr)
            return 0
        art = run_experiment(_config(args))
        print(art.table.read_text(encoding="utf-8"), end="")
        print(f"artifacts in {art.output_dir} (config {art.config_fingerprint})")
        return 0
    except TextCFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
