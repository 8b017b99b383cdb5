"""Experiment grid: datasets x methods -> persisted results, metric reports, table and figure."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import tomli

from textcf.data import DATASETS, ExampleRecord, load_dataset, write_records
from textcf.errors import ConfigurationError, GatewayUnavailableError, MethodInapplicableError
from textcf.gateway.chat import ChatClient, ChatExchange, ResponseCache, replay_only_transport
from textcf.gateway.core import ModelGateway
from textcf.metrics import MetricsReport, build_report
from textcf.search import CounterfactualResult, SearchConfig

logger = logging.getLogger(__name__)

METHODS = ("hotflip", "closs", "polyjuice", "fizle-naive", "fizle-guided")
DISPLAY = {"hotflip": "HotFlip", "closs": "CLOSS", "polyjuice": "Polyjuice",
           "fizle-naive": "FIZLE-naive", "fizle-guided": "FIZLE-guided", "sst2": "SST-2", "qnli": "QNLI"}
# fields that do not influence results and so stay out of the fingerprint
_UNFINGERPRINTED = ("output_dir", "workers", "device", "llm_cache")


@dataclass
class ExperimentConfig:
    datasets: list[str] = field(default_factory=lambda: list(DATASETS))
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    n_samples: int = 1000
    seed: int = 0
    split: str = "validation"
    search: SearchConfig = field(default_factory=SearchConfig)
    backend: str = "hf"
    data: dict[str, str] = field(default_factory=lambda: {"sst2": "data/glue", "qnli": "data/glue"})
    classifiers: dict[str, str] = field(default_factory=lambda: {
        "sst2": "textattack/bert-base-uncased-SST-2", "qnli": "textattack/bert-base-uncased-QNLI"})
    mlm_model: str = "bert-base-uncased"
    scorer_model: str = "gpt2"
    chat_model: str = "gpt-4-turbo"
    polyjuice_model: str = "uw-hai/polyjuice"
    prompt_file: str | None = None
    llm_cache: str | None = None
    llm_fixtures: str | None = None
    mock_llm: bool = False
    output_dir: str = "runs/default"
    n_boot: int = 1000
    metric_population: str = "all"
    workers: int = 1
    device: str = "cpu"

    def __post_init__(self):
        if isinstance(self.search, dict):
            self.search = SearchConfig(**self.search)
        bad = [d for d in self.datasets if d not in DATASETS]
        if bad:
            raise ConfigurationError(f"unknown datasets {bad}; choose from {list(DATASETS)}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigurationError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if self.metric_population not in ("all", "valid"):
            raise ConfigurationError("metric_population must be 'all' or 'valid'")
        if self.backend not in ("hf", "toy"):
            raise ConfigurationError("backend must be 'hf' or 'toy'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def fingerprint(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _UNFINGERPRINTED}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        path = Path(path)
        raw = path.read_text(encoding="utf-8")
        data = json.loads(raw) if path.suffix == ".json" else tomli.loads(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)} in {path}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def cache_path(self) -> Path:
        return Path(self.llm_cache) if self.llm_cache else Path(self.output_dir) / "llm_cache.jsonl"


@dataclass
class RunArtifact:
    output_dir: Path
    results: list[Path]
    reports: Path
    table: Path
    plot: Path
    log: Path
    config_fingerprint: str


# --- model wiring -------------------------------------------------------------------

@dataclass
class MethodContext:
    config: ExperimentConfig
    gateway: ModelGateway
    prompts: object = None
    generator: object = None
    generator_error: str | None = None


def build_chat(config: ExperimentConfig) -> ChatClient:
    cache = ResponseCache(config.cache_path())
    if config.llm_fixtures:
        with open(config.llm_fixtures, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = ChatExchange(**json.loads(line))
                    cache._entries.setdefault(rec.cache_key, rec)
    transport = replay_only_transport if config.mock_llm else None
    return ChatClient(config.chat_model, cache=cache, transport=transport)


class ModelFactory:
    """Builds and memoizes per-dataset gateways; load failures become per-method skips."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self._shared: dict[str, object] = {}
        self._errors: dict[str, str] = {}
        self._contexts: dict[str, MethodContext] = {}

    def _shared_part(self, name: str, build: Callable):
        if name not in self._shared and name not in self._errors:
            try:
                self._shared[name] = build()
            except (GatewayUnavailableError, MethodInapplicableError, ImportError) as exc:
                logger.warning("%s unavailable: %s", name, exc)
                self._errors[name] = str(exc)
        return self._shared.get(name)

    def context(self, dataset: str) -> MethodContext:
        if dataset in self._contexts:
            return self._contexts[dataset]
        cfg = self.config
        chat = self._shared_part("chat", lambda: build_chat(cfg))
        from textcf.llm_methods import PromptBook

        prompts = self._shared_part("prompts", lambda: PromptBook.load(cfg.prompt_file))
        if cfg.backend == "toy":
            from textcf.toy import NegationGenerator, toy_gateway

            gateway = toy_gateway(chat=chat, seed=0)
            generator = NegationGenerator()
        else:
            from textcf.gateway import hf
            from textcf.llm_methods import PolyjuiceAdapter

            clf = hf.HFClassifier(cfg.classifiers[dataset], cfg.device)
            mlm = self._shared_part("mlm", lambda: hf.HFMaskedLM(cfg.mlm_model, cfg.device, clf))
            scorer = self._shared_part("scorer", lambda: hf.GPT2Perplexity(cfg.scorer_model, cfg.device))
            gateway = ModelGateway(classifier=clf, mlm=mlm, scorer=scorer, chat=chat)
            generator = self._shared_part("polyjuice", lambda: PolyjuiceAdapter(cfg.polyjuice_model, cfg.device))
        ctx = MethodContext(cfg, gateway, prompts, generator, self._errors.get("polyjuice"))
        self._contexts[dataset] = ctx
        return ctx

    def error(self, name: str) -> str | None:
        return self._errors.get(name)


def inapplicable_reason(method: str, ctx: MethodContext) -> str | None:
    g = ctx.gateway
    if method in ("hotflip", "closs") and not g.classifier.supports_gradients:
        return "classifier exposes no gradients"
    if method == "closs" and g.mlm is None:
        return "masked language model unavailable"
    if method == "polyjuice" and ctx.generator is None:
        return ctx.generator_error or "controlled generator unavailable"
    if method.startswith("fizle") and (g.chat is None or ctx.prompts is None):
        return "chat client or prompt templates unavailable"
    return None


def generate(method: str, example: ExampleRecord, ctx: MethodContext) -> CounterfactualResult:
    from textcf import closs, llm_methods, search

    if method == "hotflip":
        return search.hotflip_generate(example, ctx.config.search, ctx.gateway)
    if method == "closs":
        return closs.closs_generate(example, ctx.config.search, ctx.gateway)
    if method == "fizle-naive":
        return llm_methods.fizle_naive_generate(example, ctx.gateway, ctx.prompts)
    if method == "fizle-guided":
        return llm_methods.fizle_guided_generate(example, ctx.gateway, ctx.prompts)
    if method == "polyjuice":
        code = llm_methods.default_control_code(example.dataset)
        return llm_methods.controlled_generate(example, code, ctx.generator, ctx.gateway)
    raise ConfigurationError(f"unknown method {method!r}")


def run_one(method: str, example: ExampleRecord, ctx: MethodContext) -> CounterfactualResult:
    """One example, isolated: any exception becomes a failure record."""
    try:
        result = generate(method, example, ctx)
    except Exception as exc:  # noqa: BLE001 - per-example isolation
        reason = "method_inapplicable" if isinstance(exc, MethodInapplicableError) else "error"
        logger.warning("%s failed on %s: %s", method, example.id, exc)
        try:
            original = ctx.gateway.classify(example.classifier_input).label
        except Exception:  # noqa: BLE001
            original = example.gold_label
        return CounterfactualResult.failure(example.id, method, example.classifier_input, original, reason,
                                            metadata={"error": f"{type(exc).__name__}: {exc}"})
    if result.counterfactual_text is not None and ctx.gateway.scorer is not None:
        result.perplexity = ctx.gateway.sequence_perplexity(result.counterfactual_text)
    return result


# --- persistence --------------------------------------------------------------------

def results_path(output_dir: Path, dataset: str, method: str) -> Path:
    return output_dir / "results" / f"{dataset}__{method}.jsonl"


def read_results(path: Path) -> list[CounterfactualResult]:
    """Parse a results file, dropping a torn trailing line left by an interrupted run."""
    if not path.exists():
        return []
    good: list[str] = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if not line.endswith("\n"):
                break
            try:
                json.loads(line)
            except json.JSONDecodeError:
                break
            good.append(line)
    text = "".join(good)
    if path.read_text(encoding="utf-8") != text:
        logger.warning("discarding incomplete tail of %s", path)
        path.write_text(text, encoding="utf-8")
    return [CounterfactualResult.from_json(json.loads(line)) for line in good]


def _record_line(result: CounterfactualResult, dataset: str, fingerprint: str) -> str:
    rec = {**result.to_json(), "dataset": dataset, "config_fingerprint": fingerprint}
    return json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n"


def run_cell(dataset: str, method: str, examples: Sequence[ExampleRecord], ctx: MethodContext,
             path: Path, fingerprint: str) -> list[CounterfactualResult]:
    done = {r.example_id: r for r in read_results(path)}
    todo = [e for e in examples if e.id not in done]
    if done:
        logger.info("%s/%s: resuming with %d of %d examples done", dataset, method, len(done), len(examples))
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        with ThreadPoolExecutor(max_workers=max(1, ctx.config.workers)) as pool:
            for result in pool.map(lambda e: run_one(method, e, ctx), todo):
                fh.write(_record_line(result, dataset, fingerprint))
                fh.flush()
                done[result.example_id] = result
    return [done[e.id] for e in examples]


def run_experiment(config: ExperimentConfig, factory: ModelFactory | None = None) -> RunArtifact:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    fp = config.fingerprint
    log_path = out / "run.log"
    handler = logging.FileHandler(log_path, encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("textcf")
    root.addHandler(handler)
    root.setLevel(min(root.level or logging.INFO, logging.INFO))
    try:
        logger.info("run %s: datasets=%s methods=%s n=%d", fp, config.datasets, config.methods, config.n_samples)
        (out / "config.json").write_text(json.dumps({"config_fingerprint": fp, **config.to_dict()},
                                                    indent=2, sort_keys=True) + "\n", encoding="utf-8")
        factory = factory or ModelFactory(config)
        reports: list[MetricsReport] = []
        paths: list[Path] = []
        for dataset in config.datasets:
            examples = load_dataset(dataset, config.n_samples, config.seed, config.data.get(dataset, "toy"),
                                    config.split)
            write_records(examples, out / "samples" / f"{dataset}.jsonl")
            try:
                ctx = factory.context(dataset)
            except GatewayUnavailableError as exc:
                logger.error("classifier for %s unavailable: %s", dataset, exc)
                reports += [_skipped(m, dataset, fp, str(exc)) for m in config.methods]
                continue
            for method in config.methods:
                reason = inapplicable_reason(method, ctx)
                if reason:
                    logger.warning("skipping %s on %s: %s", method, dataset, reason)
                    reports.append(_skipped(method, dataset, fp, reason))
                    continue
                path = results_path(out, dataset, method)
                results = run_cell(dataset, method, examples, ctx, path, fp)
                paths.append(path)
                reports.append(build_report(results, method, dataset, fp, ctx.gateway.scorer_model_id,
                                            config.n_boot, config.seed, config.metric_population == "valid"))
        return write_outputs(reports, out, fp, paths, log_path)
    finally:
        root.removeHandler(handler)
        handler.close()


def _skipped(method, dataset, fp, reason) -> MetricsReport:
    return MetricsReport(method, dataset, 0, None, None, None, None, None, None, None, fp, skipped=reason)


def write_outputs(reports: list[MetricsReport], out: Path, fp: str, result_paths: list[Path],
                  log_path: Path) -> RunArtifact:
    reports_path = out / "reports.jsonl"
    with reports_path.open("w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    table_path = out / "table.md"
    table_path.write_text(render_table(reports, fp), encoding="utf-8")
    plot_path = emit_plot(reports, out / "figure.png")
    return RunArtifact(out, result_paths, reports_path, table_path, plot_path, log_path, fp)


def rebuild_reports(output_dir: str | Path) -> RunArtifact:
    """Recompute every report from the persisted results and the saved run config."""
    out = Path(output_dir)
    saved = json.loads((out / "config.json").read_text(encoding="utf-8"))
    fp = saved.pop("config_fingerprint")
    config = ExperimentConfig(**saved)
    previous = {}
    if (out / "reports.jsonl").exists():
        for line in (out / "reports.jsonl").read_text(encoding="utf-8").splitlines():
            r = json.loads(line)
            previous[(r["method"], r["dataset"])] = r.get("skipped")
    reports, paths = [], []
    for dataset in config.datasets:
        for method in config.methods:
            path = results_path(out, dataset, method)
            results = read_results(path)
            if not results:
                reports.append(_skipped(method, dataset, fp, previous.get((method, dataset)) or "no results"))
                continue
            paths.append(path)
            scorer_id = config.scorer_model if config.backend == "hf" else "toy-bigram"
            reports.append(build_report(results, method, dataset, fp, scorer_id, config.n_boot, config.seed,
                                        config.metric_population == "valid"))
    return write_outputs(reports, out, fp, paths, out / "run.log")


# --- rendering ----------------------------------------------------------------------

_COLUMNS = (("lfs", "LFS ↑", max, "{:.2f}"), ("mean_similarity", "L.Sim ↑", max, "{:.2f}"),
            ("median_perplexity", "PPL ↓", min, "{:.0f}"))


def render_table(reports: Sequence[MetricsReport], fingerprint: str | None = None) -> str:
    """Markdown table: one row per method, LFS / L.Sim / PPL per dataset, best per column in bold."""
    methods = list(dict.fromkeys(r.method for r in reports))
    datasets = list(dict.fromkeys(r.dataset for r in reports))
    by_key = {(r.method, r.dataset): r for r in reports}
    fps = {r.config_fingerprint for r in reports}
    fingerprint = fingerprint or (fps.pop() if len(fps) == 1 else "mixed")

    header = ["Method"] + [f"{DISPLAY.get(d, d)} {label}" for d in datasets for _, label, _, _ in _COLUMNS]
    cells: dict[tuple[str, str, str], str] = {}
    bold: set[tuple[str, str, str]] = set()
    for d in datasets:
        for attr, _, best, fmt in _COLUMNS:
            shown = {}
            for m in methods:
                r = by_key.get((m, d))
                v = getattr(r, attr) if r is not None else None
                cells[(m, d, attr)] = "—" if v is None else fmt.format(v)
                if v is not None:
                    shown[m] = float(fmt.format(v))
            if shown:
                target = best(shown.values())
                bold |= {(m, d, attr) for m, v in shown.items() if v == target}
    lines = [f"<!-- config_fingerprint: {fingerprint} -->", "",
             "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for m in methods:
        row = [DISPLAY.get(m, m)]
        for d in datasets:
            for attr, _, _, _ in _COLUMNS:
                c = cells[(m, d, attr)]
                row.append(f"**{c}**" if (m, d, attr) in bold else c)
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def plot_figure(reports: Sequence[MetricsReport]):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    methods = list(dict.fromkeys(r.method for r in reports))
    datasets = list(dict.fromkeys(r.dataset for r in reports))
    by_key = {(r.method, r.dataset): r for r in reports}
    panels = (("lfs", "lfs_ci", "Label flip score"), ("mean_similarity", "similarity_ci", "Levenshtein similarity"),
              ("median_perplexity", "perplexity_ci", "Median perplexity"))
    fig, axes = plt.subplots(len(panels), len(datasets), figsize=(4.5 * len(datasets), 9), squeeze=False)
    x = np.arange(len(methods))
    for col, d in enumerate(datasets):
        for row, (attr, ci_attr, title) in enumerate(panels):
            ax = axes[row][col]
            vals, lo, hi = [], [], []
            for m in methods:
                r = by_key.get((m, d))
                v = getattr(r, attr) if r is not None else None
                ci = getattr(r, ci_attr) if r is not None else None
                vals.append(np.nan if v is None else v)
                lo.append(0.0 if v is None or ci is None else v - ci[0])
                hi.append(0.0 if v is None or ci is None else ci[1] - v)
            ax.bar(x, vals, yerr=np.array([lo, hi]), capsize=3, color="tab:blue", alpha=0.8)
            ax.set_xticks(x)
            ax.set_xticklabels([DISPLAY.get(m, m) for m in methods], rotation=30, ha="right", fontsize=8)
            ax.set_title(f"{DISPLAY.get(d, d)}: {title}", fontsize=9)
    fig.tight_layout()
    return fig


def emit_plot(reports: Sequence[MetricsReport], path: str | Path) -> Path:
    """Grouped bars per metric and dataset with bootstrap-CI error bars."""
    import matplotlib.pyplot as plt

    path = Path(path)
    fig = plot_figure(reports)
    fps = sorted({r.config_fingerprint for r in reports})
    try:
        fig.savefig(path, dpi=100, metadata={"Description": f"config_fingerprint: {','.join(fps)}"})
    finally:
        plt.close(fig)
    return path
