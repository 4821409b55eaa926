"""Tests for embedders, completion backends, the embedding cache and HTTP retries."""

import numpy as np
import pytest
import requests
from tenacity import wait_none

import prompts
import providers
from config import DimensionMismatchError, PromptTooLongError, ProviderConfig, ProviderError
from core_kg import parse_extraction_output
from cost_ledger import CostLedger, Stage
from providers import (EmbeddingCache, MockEmbeddingProvider, MockLLMProvider, RemoteEmbeddingProvider,
                       RemoteLLMProvider, cosine, cosine_matrix, make_embedder, make_llm,
                       mock_extract_entities)


def _mock_embedder(ledger=None, style="semantic", seed=42, cache=None):
    config = ProviderConfig(kind="mock", model_name="semantic-mock", dim=64, mock_style=style)
    return MockEmbeddingProvider(config, ledger if ledger is not None else CostLedger(), cache, seed=seed)


class _FakeResponse:

    def __init__(self, status_code: int, body=None):
        self.status_code = status_code
        self._body = body

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.HTTPError(f"HTTP {self.status_code}")

    def json(self):
        return self._body


def _scripted_post(responses):
    calls = []

    def post(url, json=None, headers=None, timeout=None):
        calls.append({"url": url, "json": json, "headers": headers})
        return responses[min(len(calls) - 1, len(responses) - 1)]
    return post, calls


@pytest.fixture
def no_wait(monkeypatch):
    monkeypatch.setattr(providers._HTTPClient, "wait", wait_none())


# ===================================================================
# Mock embedder
# ===================================================================

class TestMockEmbedder:

    def test_deterministic_unit_vectors(self):
        texts = [f"sample text number {i} about topic {i % 7}" for i in range(1000)]
        a = _mock_embedder().embed_batch(texts)
        b = _mock_embedder().embed_batch(texts)
        for va, vb in zip(a, b):
            assert va.shape == (64,)
            assert np.linalg.norm(va) == pytest.approx(1.0, abs=1e-9)
            assert np.array_equal(va, vb)

    def test_seed_changes_vectors(self):
        a = _mock_embedder(seed=1).embed("harbor regatta")
        b = _mock_embedder(seed=2).embed("harbor regatta")
        assert not np.array_equal(a, b)

    def test_semantic_style_shares_words(self):
        e = _mock_embedder()
        related = cosine(e.embed("lantern regatta harbor"), e.embed("harbor lantern festival"))
        unrelated = cosine(e.embed("lantern regatta harbor"), e.embed("granary bread flour"))
        assert related > unrelated

    def test_hash_style_distinct_strings(self):
        e = _mock_embedder(style="hash")
        assert not np.array_equal(e.embed("a b"), e.embed("a  b"))

    def test_stopword_only_text_still_embeds(self):
        vec = _mock_embedder().embed("the of and")
        assert np.linalg.norm(vec) == pytest.approx(1.0)

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError):
            _mock_embedder().embed_batch(["ok", ""])


class TestEmbeddingLedger:

    def test_one_entry_per_batch(self):
        ledger = CostLedger()
        _mock_embedder(ledger).embed_batch(["one two", "three", "four five six"])
        assert len(ledger) == 1
        assert ledger.entries[0].stage is Stage.EMBEDDING
        assert ledger.entries[0].input_tokens == 6

    def test_cache_hit_charges_nothing(self):
        ledger = CostLedger()
        e = _mock_embedder(ledger)
        first = e.embed("cached text")
        second = e.embed("cached text")
        assert np.array_equal(first, second)
        assert [x.input_tokens for x in ledger.entries] == [2, 0]

    def test_duplicates_in_one_batch_sent_once(self):
        ledger = CostLedger()
        vectors = _mock_embedder(ledger).embed_batch(["same words", "same words"])
        assert np.array_equal(vectors[0], vectors[1])
        assert ledger.entries[0].input_tokens == 2


class TestEmbeddingCache:

    def test_persists_across_instances(self, tmp_path):
        path = str(tmp_path / "cache.jsonl")
        first_ledger, second_ledger = CostLedger(), CostLedger()
        v1 = _mock_embedder(first_ledger, cache=EmbeddingCache(path)).embed("persist me")
        v2 = _mock_embedder(second_ledger, cache=EmbeddingCache(path)).embed("persist me")
        assert np.array_equal(v1, v2)
        assert second_ledger.tokens(Stage.EMBEDDING)["input_tokens"] == 0

    def test_corrupt_line_ignored(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        path.write_text('{"key": "k", "vector": [1.0, 0.0]}\n{broken\n')
        cache = EmbeddingCache(str(path))
        assert len(cache) == 1
        assert cache.get("k").tolist() == [1.0, 0.0]


# ===================================================================
# Mock LLM
# ===================================================================

class TestMockLLM:

    def test_answer_span(self, llm):
        prompt = prompts.render_answer_prompt("What is the capital of France?",
                                              "France has a capital. ANSWER_SPAN: Paris")
        assert llm.complete(prompt, 64) == "Paris"

    @pytest.mark.parametrize("context, expected", [
        ("Seat of government. ANSWER_SPAN: Washington D.C.", "Washington D.C"),
        ("ANSWER_SPAN: Port Ellis; more text", "Port Ellis"),
        ("ANSWER_SPAN: Velmora Quay.\nTravelers return.", "Velmora Quay"),
    ])
    def test_span_keeps_inner_periods(self, llm, context, expected):
        prompt = prompts.render_answer_prompt("Which city?", context)
        assert llm.complete(prompt, 64) == expected

    def test_best_overlapping_block_wins(self, llm):
        context = ("The granary bakes bread. ANSWER_SPAN: Wyncombe Mill\n\n"
                   "The harbor hosts the lantern regatta. ANSWER_SPAN: Velmora Quay")
        prompt = prompts.render_answer_prompt("Which harbor hosts the lantern regatta?", context)
        assert llm.complete(prompt, 64) == "Velmora Quay"

    def test_no_span_answers_unknown(self, llm):
        assert llm.complete(prompts.render_answer_prompt("Who?", "nothing here"), 64) == "unknown"

    def test_extraction_entities(self, llm):
        reply = llm.complete(prompts.render_extraction_prompt("Alice met Bob."), 2048, Stage.EXTRACTION)
        entities, relations = parse_extraction_output(reply)
        assert {e[0] for e in entities} == {"Alice", "Bob"}
        assert [(r[0], r[1]) for r in relations] == [("Alice", "Bob")]

    def test_ledger_stage_and_tokens(self, llm, ledger):
        llm.complete(prompts.render_answer_prompt("Who?", "ANSWER_SPAN: Paris"), 64)
        entry = ledger.entries[-1]
        assert entry.stage is Stage.GENERATION
        assert entry.output_tokens == 1
        assert entry.input_tokens > 0

    def test_prompt_ceiling(self):
        ledger = CostLedger()
        llm = MockLLMProvider(ProviderConfig(kind="mock", model_name="m", context_ceiling_tokens=5), ledger)
        with pytest.raises(PromptTooLongError):
            llm.complete("one two three four five six", 10)
        assert len(ledger) == 0

    def test_empty_prompt_rejected(self, llm):
        with pytest.raises(ValueError):
            llm.complete("", 10)


class TestMockEntityRules:

    def test_bigrams(self):
        assert mock_extract_entities("Alice visited New York with Bob.") == ["Alice", "New York", "Bob"]

    def test_stopword_breaks_run(self):
        assert "The" not in mock_extract_entities("The Harbor opened.")


# ===================================================================
# Remote clients
# ===================================================================

class TestRemoteClients:

    def _remote_embedder(self, ledger, dim=3):
        config = ProviderConfig(kind="remote", endpoint="http://api.test/v1", model_name="emb", dim=dim)
        return RemoteEmbeddingProvider(config, ledger, EmbeddingCache())

    def test_retry_then_success(self, monkeypatch, no_wait):
        ok = _FakeResponse(200, {"data": [{"index": 0, "embedding": [1.0, 0.0, 0.0]}]})
        post, calls = _scripted_post([_FakeResponse(503), ok])
        monkeypatch.setattr(providers.requests, "post", post)
        vec = self._remote_embedder(CostLedger()).embed("hello")
        assert vec.tolist() == [1.0, 0.0, 0.0]
        assert len(calls) == 2
        assert calls[0]["url"] == "http://api.test/v1/embeddings"

    def test_retries_exhausted(self, monkeypatch, no_wait):
        post, calls = _scripted_post([_FakeResponse(429)])
        monkeypatch.setattr(providers.requests, "post", post)
        with pytest.raises(ProviderError):
            self._remote_embedder(CostLedger()).embed("hello")
        assert len(calls) == 3

    def test_client_error_not_retried(self, monkeypatch, no_wait):
        post, calls = _scripted_post([_FakeResponse(400)])
        monkeypatch.setattr(providers.requests, "post", post)
        with pytest.raises(ProviderError):
            self._remote_embedder(CostLedger()).embed("hello")
        assert len(calls) == 1

    def test_dimension_mismatch(self, monkeypatch, no_wait):
        post, _ = _scripted_post([_FakeResponse(200, {"data": [{"index": 0, "embedding": [1.0, 0.0]}]})])
        monkeypatch.setattr(providers.requests, "post", post)
        with pytest.raises(DimensionMismatchError):
            self._remote_embedder(CostLedger()).embed("hello")

    def test_chat_completion_and_auth_header(self, monkeypatch, no_wait):
        monkeypatch.setenv("CONCEPTRAG_API_KEY", "sk-test")
        body = {"choices": [{"message": {"content": "Paris"}}]}
        post, calls = _scripted_post([_FakeResponse(200, body)])
        monkeypatch.setattr(providers.requests, "post", post)
        ledger = CostLedger()
        config = ProviderConfig(kind="remote", endpoint="http://api.test/v1", model_name="chat",
                                price_per_1k_input=0.001, price_per_1k_output=0.002)
        assert RemoteLLMProvider(config, ledger).complete("Capital of France?", 16) == "Paris"
        assert calls[0]["headers"]["Authorization"] == "Bearer sk-test"
        assert calls[0]["json"]["max_tokens"] == 16
        assert ledger.entries[0].cost_usd == pytest.approx((4 * 0.001 + 1 * 0.002) / 1000)


# ===================================================================
# Factories and similarity helpers
# ===================================================================

class TestFactories:

    def test_make_mock_providers(self, ledger):
        assert isinstance(make_embedder(ProviderConfig(), ledger), MockEmbeddingProvider)
        assert isinstance(make_llm(ProviderConfig(model_name="mock-llm"), ledger), MockLLMProvider)

    def test_cosine_zero_vector(self):
        assert cosine(np.zeros(3), np.ones(3)) == 0.0

    def test_cosine_matrix(self):
        matrix = np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]])
        sims = cosine_matrix(np.array([1.0, 0.0]), matrix)
        assert sims.tolist() == [1.0, 0.0, 0.0]
        assert cosine_matrix(np.array([1.0, 0.0]), np.zeros((0, 2))).size == 0
