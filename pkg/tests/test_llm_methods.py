import json
from pathlib import Path

import pytest

from conftest import ScriptedLLM
from textcf.data import ExampleRecord
from textcf.errors import ConfigurationError, MalformedOutputError, MethodInapplicableError
from textcf.gateway.chat import ChatClient, replay_only_transport
from textcf.llm_methods import (
    ControlCode,
    PolyjuiceAdapter,
    PromptBook,
    PromptTemplate,
    controlled_generate,
    default_control_code,
    extract_counterfactual,
    fizle_guided_generate,
    fizle_naive_generate,
    parse_important_words,
    qnli_format_fix,
)
from textcf.toy import EchoGenerator, NegationGenerator

REPLIES = json.loads((Path(__file__).parent / "fixtures" / "chat_replies.json").read_text())
POS = ExampleRecord("p1", "sst2", 1, text="the movie was great")
PAIR = ExampleRecord("q1", "qnli", 0, question="what is the plot ?", sentence="the plot was great")


@pytest.mark.parametrize("raw,expected", REPLIES)
def test_extract_counterfactual_fixture_corpus(raw, expected):
    assert extract_counterfactual(raw) == expected


@pytest.mark.parametrize("raw", ["", "   \n  ", "Counterfactual: \"\""])
def test_extract_rejects_empty(raw):
    with pytest.raises(MalformedOutputError):
        extract_counterfactual(raw)


def test_parse_important_words_keeps_words_from_input():
    raw = "Important words: great, Movie, fantastic and was"
    assert parse_important_words(raw, "the movie was great") == ["great", "movie", "was"]
    assert parse_important_words("I cannot help with that.", "the movie was great") == []


def test_prompt_book_loads_and_binds():
    book = PromptBook.load()
    values = book.bind(POS, 1)
    assert values["original_label"] == "positive" and values["target_label"] == "negative"
    system, user = book.templates["fizle_naive"].render(**values)
    assert "negative" in system and user == "the movie was great"
    with pytest.raises(ConfigurationError):
        book.templates["fizle_guided_edit"].render(**values)


def test_template_unbound_placeholder():
    with pytest.raises(ConfigurationError):
        PromptTemplate("t", "{a} {b}", "{a}", "1").render(a=1)


def test_custom_prompt_file_must_define_all_templates(tmp_path):
    path = tmp_path / "p.toml"
    path.write_text('[templates.fizle_naive]\nsystem = "x"\n')
    with pytest.raises(ConfigurationError):
        PromptBook.load(path)


def test_fizle_naive_flips_and_records_exchange(gateway, scripted_chat):
    gateway.chat = scripted_chat
    r = fizle_naive_generate(POS, gateway, PromptBook.load())
    assert r.flipped and r.counterfactual_text == "the movie was awful"
    (ex,) = r.metadata["exchanges"]
    assert ex["template"] == "fizle_naive" and ex["model_id"] == scripted_chat.model_id
    assert len(scripted_chat.llm.calls) == 1


def test_fizle_label_comes_from_classifier_not_llm(gateway, scripted_chat):
    scripted_chat.llm.edit_reply = "Counterfactual: the movie was great (now negative!)"
    gateway.chat = scripted_chat
    r = fizle_naive_generate(POS, gateway, PromptBook.load())
    assert not r.flipped and r.failure_reason == "no_flip" and r.counterfactual_label == 1


def test_fizle_guided_two_stages(gateway, scripted_chat):
    gateway.chat = scripted_chat
    r = fizle_guided_generate(POS, gateway, PromptBook.load())
    assert r.flipped and r.metadata["important_words"] == ["great"]
    assert [e["template"] for e in r.metadata["exchanges"]] == ["fizle_guided_identify", "fizle_guided_edit"]
    assert "great" in scripted_chat.llm.calls[1][0]


def test_fizle_guided_falls_back_when_stage_one_unparseable(gateway, scripted_chat):
    scripted_chat.llm.identify_reply = "I would rather not say."
    gateway.chat = scripted_chat
    r = fizle_guided_generate(POS, gateway, PromptBook.load())
    assert r.method == "fizle-guided" and r.metadata["stage1_parse_failed"]
    assert [e["template"] for e in r.metadata["exchanges"]] == ["fizle_guided_identify", "fizle_naive"]
    assert r.flipped


def test_fizle_malformed_reply(gateway, scripted_chat):
    scripted_chat.llm.edit_reply = "```\n\n```"
    gateway.chat = scripted_chat
    r = fizle_naive_generate(POS, gateway, PromptBook.load())
    assert r.failure_reason == "malformed_output" and r.counterfactual_text is None


def test_fizle_unavailable_llm(gateway, tmp_path):
    gateway.chat = ChatClient(cache=tmp_path / "c.jsonl", transport=replay_only_transport)
    r = fizle_naive_generate(POS, gateway, PromptBook.load())
    assert r.failure_reason == "llm_unavailable"


def test_mock_mode_replays_recorded_run(gateway, scripted_chat, tmp_path):
    gateway.chat = scripted_chat
    first = fizle_guided_generate(POS, gateway, PromptBook.load())
    gateway.chat = ChatClient(cache=scripted_chat.cache.path, transport=replay_only_transport)
    again = fizle_guided_generate(POS, gateway, PromptBook.load())
    assert again.counterfactual_text == first.counterfactual_text and gateway.chat.upstream_calls == 0


@pytest.mark.parametrize("generated,expected", [
    ("what is the story ? [SEP] the plot was awful", "what is the story ? [SEP] the plot was awful"),
    ("what is the story ?", "what is the story ? [SEP] the plot was great"),
    ("a [sep] b [SEP] c", "a [SEP] b c"),
    ("a [SEP]", "a [SEP] the plot was great"),
    ("", "what is the plot ? [SEP] the plot was great"),
])
def test_qnli_format_fix(generated, expected):
    out = qnli_format_fix(generated, PAIR)
    assert out == expected and out.count(" [SEP] ") == 1


def test_controlled_generation_with_stub(gateway):
    r = controlled_generate(POS, default_control_code("sst2"), NegationGenerator(), gateway)
    assert r.flipped and r.counterfactual_text == "the movie was awful"
    assert r.metadata["control_code"] == "negation"


def test_controlled_generation_identity_is_no_flip(gateway):
    r = controlled_generate(POS, ControlCode("negation", "sst2"), EchoGenerator(), gateway)
    assert not r.flipped and r.failure_reason == "no_flip"


def test_controlled_generation_qnli_keeps_separator(gateway):
    r = controlled_generate(PAIR, default_control_code("qnli"), NegationGenerator(), gateway)
    assert r.counterfactual_text.count(" [SEP] ") == 1
    assert default_control_code("qnli").generator_code is None


def test_controlled_generation_without_generator(gateway):
    with pytest.raises(MethodInapplicableError):
        controlled_generate(POS, default_control_code("sst2"), None, gateway)


def test_polyjuice_adapter_reports_missing_dependency():
    try:
        import polyjuice  # noqa: F401
    except ImportError:
        with pytest.raises(MethodInapplicableError):
            PolyjuiceAdapter()
    else:
        pytest.skip("polyjuice installed")


def test_scripted_llm_sanity():
    assert ScriptedLLM()("m", "Important words: x", "the movie was great", {}) == "Important words: great"
