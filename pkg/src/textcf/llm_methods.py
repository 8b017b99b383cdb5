"""Black-box generators: FIZLE naive / guided prompting and a Polyjuice-style controlled generator.

Every counterfactual is re-classified with the gateway's classifier; the generator's own
claim about the label is never used.
"""
from __future__ import annotations

import re
import string
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Protocol

import tomli

from textcf.data import PAIR_SEPARATOR, SEP, ExampleRecord, preprocess
from textcf.errors import (
    ConfigurationError,
    GatewayUnavailableError,
    MalformedOutputError,
    MethodInapplicableError,
    UpstreamUnavailableError,
)
from textcf.gateway.core import ModelGateway
from textcf.search import CounterfactualResult


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system_text: str
    user_text: str
    version: str

    def placeholders(self) -> set[str]:
        fmt = string.Formatter()
        return {f for text in (self.system_text, self.user_text) for _, f, _, _ in fmt.parse(text) if f}

    def render(self, **values) -> tuple[str, str]:
        missing = self.placeholders() - values.keys()
        if missing:
            raise ConfigurationError(f"template {self.name!r} has unbound placeholders {sorted(missing)}")
        return self.system_text.format(**values), self.user_text.format(**values)


@dataclass(frozen=True)
class PromptBook:
    templates: dict[str, PromptTemplate]
    tasks: dict[str, dict]
    source: str

    @classmethod
    def load(cls, path: str | Path | None = None) -> "PromptBook":
        if path is None:
            raw = resources.files("textcf").joinpath("prompts.toml").read_text(encoding="utf-8")
            source = "textcf/prompts.toml"
        else:
            raw = Path(path).read_text(encoding="utf-8")
            source = str(path)
        data = tomli.loads(raw)
        templates = {
            name: PromptTemplate(name, t["system"], t.get("user", "{input_text}"), str(t.get("version", "0")))
            for name, t in data.get("templates", {}).items()
        }
        for needed in ("fizle_naive", "fizle_guided_identify", "fizle_guided_edit"):
            if needed not in templates:
                raise ConfigurationError(f"{source} lacks template {needed!r}")
        return cls(templates, data.get("tasks", {}), source)

    def bind(self, example: ExampleRecord, original_label: int, **extra) -> dict:
        task = self.tasks.get(example.dataset)
        if task is None:
            raise ConfigurationError(f"{self.source} has no [tasks.{example.dataset}] section")
        names = task["label_names"]
        return {
            "task_description": task["description"],
            "label_names": ", ".join(names),
            "original_label": names[original_label],
            "target_label": names[1 - original_label],
            "input_text": example.classifier_input,
            **extra,
        }


# --- response parsing ----------------------------------------------------------------

_FENCE = re.compile(r"```[^\n]*\n(.*?)```", re.S)
_PREFIX = re.compile(
    r"^\s*(?:[-*>]\s*)?(?:\*\*)?(?:counterfactual(?:\s+(?:text|sentence|example))?|edited\s+text|"
    r"modified\s+text|new\s+text|output|answer|revised\s+text)(?:\*\*)?\s*[:\-]\s*(?:\*\*)?",
    re.I,
)
_QUOTES = "\"'“”‘’`"


def _strip_wrapping(line: str) -> str:
    line = line.strip()
    line = re.sub(r"^(?:[-*>]|\d+[.)])\s+", "", line)
    line = line.strip().strip("*").strip()
    while len(line) >= 2 and line[0] in _QUOTES and line[-1] in _QUOTES:
        line = line[1:-1].strip()
    return line


def extract_counterfactual(raw_response: str) -> str:
    """Pull the counterfactual sentence out of a chat reply and preprocess it."""
    text = raw_response or ""
    fenced = _FENCE.search(text)
    if fenced:
        text = fenced.group(1)
    lines = [ln for ln in text.splitlines() if ln.strip()]
    chosen = None
    for i, ln in enumerate(lines):
        m = _PREFIX.match(ln)
        if m:
            rest = ln[m.end():].strip()
            if not rest and i + 1 < len(lines):
                rest = lines[i + 1]
            chosen = rest
            break
    if chosen is None:
        chosen = lines[0] if lines else ""
    out = preprocess(_strip_wrapping(chosen))
    if not out:
        raise MalformedOutputError(f"no counterfactual found in response {raw_response[:80]!r}")
    return out


def parse_important_words(raw_response: str, input_text: str) -> list[str]:
    """Words listed in a stage-1 reply that actually occur in the input, in listed order."""
    text = raw_response or ""
    m = re.search(r"important\s+words?\s*[:\-]\s*(.*)", text, re.I | re.S)
    body = m.group(1) if m else text
    present = set(preprocess(input_text).split())
    words: list[str] = []
    for piece in re.split(r"[,;\n]|\band\b", body):
        w = preprocess(_strip_wrapping(piece)).strip(".")
        if w and w in present and w not in words:
            words.append(w)
    return words


def qnli_format_fix(generated: str, original: ExampleRecord) -> str:
    """Make a generated QNLI input carry exactly one separator and an answer sentence."""
    text = re.sub(r"\s*\[SEP\]\s*", PAIR_SEPARATOR, generated, flags=re.I).strip()
    if SEP not in text:
        return f"{text}{PAIR_SEPARATOR}{original.sentence}" if text else f"{original.question}{PAIR_SEPARATOR}{original.sentence}"
    head, _, tail = text.partition(SEP)
    head = head.strip()
    tail = " ".join(tail.replace(SEP, " ").split())
    return f"{head}{PAIR_SEPARATOR}{tail or original.sentence}"


# --- chat methods ---------------------------------------------------------------------

def _exchange_meta(ex, template: PromptTemplate) -> dict:
    return {"template": template.name, "template_version": template.version, "model_id": ex.model_id,
            "cache_key": ex.cache_key, "response": ex.response}


def _finish(example, method, original_label, cf_text, gateway, started, meta) -> CounterfactualResult:
    label = gateway.classify(cf_text).label
    return CounterfactualResult.from_classification(
        example.id, method, example.classifier_input, original_label, cf_text, label,
        wall_time=time.perf_counter() - started, metadata=meta)


def _chat(gateway: ModelGateway, template: PromptTemplate, values: dict):
    if gateway.chat is None:
        raise GatewayUnavailableError("no chat client configured")
    system, user = template.render(**values)
    return gateway.chat.exchange(system, user)


def fizle_naive_generate(example: ExampleRecord, gateway: ModelGateway, prompts: PromptBook,
                         method: str = "fizle-naive", meta: dict | None = None) -> CounterfactualResult:
    started = time.perf_counter()
    text = example.classifier_input
    original = gateway.classify(text).label
    template = prompts.templates["fizle_naive"]
    meta = {"prompt_source": prompts.source, **(meta or {}), "exchanges": list((meta or {}).get("exchanges", []))}
    try:
        ex = _chat(gateway, template, prompts.bind(example, original))
    except (UpstreamUnavailableError, ConfigurationError, GatewayUnavailableError) as exc:
        meta["error"] = str(exc)
        return CounterfactualResult.failure(example.id, method, text, original, "llm_unavailable",
                                            wall_time=time.perf_counter() - started, metadata=meta)
    meta["exchanges"].append(_exchange_meta(ex, template))
    try:
        cf = extract_counterfactual(ex.response)
    except MalformedOutputError:
        return CounterfactualResult.failure(example.id, method, text, original, "malformed_output",
                                            wall_time=time.perf_counter() - started, metadata=meta)
    return _finish(example, method, original, cf, gateway, started, meta)


def fizle_guided_generate(example: ExampleRecord, gateway: ModelGateway, prompts: PromptBook) -> CounterfactualResult:
    """Two chat calls: name the label-driving words, then minimally edit a subset of them."""
    started = time.perf_counter()
    method = "fizle-guided"
    text = example.classifier_input
    original = gateway.classify(text).label
    identify, edit = prompts.templates["fizle_guided_identify"], prompts.templates["fizle_guided_edit"]
    meta: dict = {"prompt_source": prompts.source, "exchanges": []}
    try:
        ex1 = _chat(gateway, identify, prompts.bind(example, original))
        meta["exchanges"].append(_exchange_meta(ex1, identify))
        words = parse_important_words(ex1.response, text)
        if not words:
            meta["stage1_parse_failed"] = True
            return fizle_naive_generate(example, gateway, prompts, method=method, meta=meta)
        meta["important_words"] = words
        ex2 = _chat(gateway, edit, prompts.bind(example, original, important_words=", ".join(words)))
    except (UpstreamUnavailableError, ConfigurationError, GatewayUnavailableError) as exc:
        meta["error"] = str(exc)
        return CounterfactualResult.failure(example.id, method, text, original, "llm_unavailable",
                                            wall_time=time.perf_counter() - started, metadata=meta)
    meta["exchanges"].append(_exchange_meta(ex2, edit))
    try:
        cf = extract_counterfactual(ex2.response)
    except MalformedOutputError:
        return CounterfactualResult.failure(example.id, method, text, original, "malformed_output",
                                            wall_time=time.perf_counter() - started, metadata=meta)
    return _finish(example, method, original, cf, gateway, started, meta)


# --- controlled generation ------------------------------------------------------------

@dataclass(frozen=True)
class ControlCode:
    value: str
    dataset: str

    @property
    def generator_code(self) -> str | None:
        """None lets the generator choose the code itself."""
        return None if self.value == "auto" else self.value


DEFAULT_CONTROL_CODES = {"sst2": "negation", "qnli": "auto"}


def default_control_code(dataset: str) -> ControlCode:
    return ControlCode(DEFAULT_CONTROL_CODES[dataset], dataset)


class ControlledGenerator(Protocol):
    model_id: str

    def generate(self, text: str, control_code: str | None = None) -> list[str]: ...


class PolyjuiceAdapter:
    """Wraps the released Polyjuice generator (optional ``polyjuice-nlp`` dependency)."""

    def __init__(self, model_path: str = "uw-hai/polyjuice", device: str = "cpu", num_perturbations: int = 1):
        try:
            from polyjuice import Polyjuice
        except ImportError as exc:
            raise MethodInapplicableError("polyjuice is not installed (pip install polyjuice_nlp)") from exc
        try:
            self._pj = Polyjuice(model_path=model_path, is_cuda=device.startswith("cuda"))
        except Exception as exc:
            raise MethodInapplicableError(f"could not load polyjuice model {model_path!r}: {exc}") from exc
        self.model_id = model_path
        self.num_perturbations = num_perturbations

    def generate(self, text, control_code=None):
        kwargs = {"ctrl_code": control_code} if control_code else {}
        return list(self._pj.perturb(orig_sent=text, num_perturbations=self.num_perturbations, **kwargs) or [])


def controlled_generate(example: ExampleRecord, code: ControlCode, generator: ControlledGenerator | None,
                        gateway: ModelGateway) -> CounterfactualResult:
    """Takes the generator's first output as the counterfactual."""
    if generator is None:
        raise MethodInapplicableError("no controlled-generation model configured")
    started = time.perf_counter()
    method = "polyjuice"
    text = example.classifier_input
    original = gateway.classify(text).label
    meta = {"control_code": code.value, "generator": getattr(generator, "model_id", type(generator).__name__)}
    try:
        outputs = generator.generate(text, code.generator_code)
    except MethodInapplicableError:
        raise
    except Exception as exc:
        raise MethodInapplicableError(f"generator failed: {exc}") from exc
    cf = preprocess(outputs[0]) if outputs else ""
    if example.dataset == "qnli" and cf:
        fixed = qnli_format_fix(cf, example)
        meta["format_fixed"] = fixed != cf
        cf = fixed
    if not cf:
        return CounterfactualResult.failure(example.id, method, text, original, "no_generation",
                                            wall_time=time.perf_counter() - started, metadata=meta)
    return _finish(example, method, original, cf, gateway, started, meta)
