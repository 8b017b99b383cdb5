from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from textcf.gateway.chat import ChatClient, ResponseCache  # noqa: E402
from textcf.toy import ANTONYMS, NegationGenerator, toy_gateway  # noqa: E402


class ScriptedLLM:
    """Stands in for the chat API: answers the two FIZLE prompt shapes deterministically."""

    def __init__(self, identify_reply=None, edit_reply=None):
        self.calls = []
        self._neg = NegationGenerator()
        self.identify_reply = identify_reply
        self.edit_reply = edit_reply

    def __call__(self, model_id, system_prompt, user_prompt, decoding):
        self.calls.append((system_prompt, user_prompt))
        if "Important words:" in system_prompt:
            if self.identify_reply is not None:
                return self.identify_reply
            polar = [w for w in user_prompt.split() if w in ANTONYMS]
            return "Important words: " + ", ".join(polar or ["nothing-here"])
        if self.edit_reply is not None:
            return self.edit_reply
        return f"Sure! Here it is.\nCounterfactual: \"{self._neg.generate(user_prompt)[0]}\""


@pytest.fixture
def gateway():
    return toy_gateway()


@pytest.fixture
def scripted_chat(tmp_path):
    llm = ScriptedLLM()
    client = ChatClient(cache=ResponseCache(tmp_path / "cache.jsonl"), transport=llm, sleep=lambda s: None)
    client.llm = llm
    return client
