"""Tests for core-KG extraction, merging and local search."""

import random
import threading

import numpy as np
import pytest

import prompts
from config import ProviderConfig
from context_bundle import CHUNK, KG_FACT, KG_PATH
from conftest import store_from_texts
from core_kg import (DelimitedExtractionBackbone, Entity, ExtractionParseError, KnowledgeGraph, Relation,
                     extract_kg, kg_local_search, normalize_name, parse_extraction_output)
from cost_ledger import CostLedger, Stage
from providers import LLMProvider, MockLLMProvider, cosine

D = prompts.TUPLE_DELIMITER
R = prompts.RECORD_DELIMITER
DONE = prompts.COMPLETION_DELIMITER


def _entity(name, etype="PERSON", desc=""):
    return f'("entity"{D}{name}{D}{etype}{D}{desc})'


def _relation(head, tail, desc="", strength="1"):
    return f'("relationship"{D}{head}{D}{tail}{D}{desc}{D}{strength})'


def _reply(*records):
    return R.join(records) + R + DONE


class ScriptedLLM(LLMProvider):
    """Replies by chunk text when scripted, otherwise from a queue"""

    def __init__(self, by_text=None, queue=None, ledger=None):
        super().__init__(ProviderConfig(kind="mock", model_name="scripted"), ledger if ledger is not None else CostLedger())
        self.by_text = dict(by_text or {})
        self.queue = list(queue or [])
        self.prompts = []
        self._lock = threading.Lock()

    def _complete(self, prompt, max_output_tokens):
        with self._lock:
            self.prompts.append(prompt)
            text = prompts.extract_section(prompt, "INPUT_TEXT")
            if text in self.by_text:
                return self.by_text[text]
            return self.queue.pop(0)


def _kg(vectors, relations=(), sources=None):
    sources = sources or {}
    entities = {eid: Entity(eid, eid.title(), "CONCEPT", f"about {eid}", tuple(sources.get(eid, ())),
                            np.asarray(vec, dtype=np.float64))
                for eid, vec in vectors.items()}
    return KnowledgeGraph(entities, [Relation(h, t, "rel", w, ()) for h, t, w in relations])


def _ten_token_text(i: int) -> str:
    return "Item " + " ".join(f"word{i}x{j}" for j in range(8)) + "."


# ===================================================================
# Parsing
# ===================================================================

class TestParseExtractionOutput:

    def test_entities_and_relations(self):
        text = _reply(_entity("Alice", "person", "A traveler"), _entity("Bob"),
                      _relation("Alice", "Bob", "met at the quay", "2.5"))
        entities, relations = parse_extraction_output(text)
        assert entities == [("Alice", "PERSON", "A traveler"), ("Bob", "PERSON", "")]
        assert relations == [("Alice", "Bob", "met at the quay", 2.5)]

    def test_malformed_records_are_dropped(self):
        text = _reply(_entity("Alice"), "garbage", '("relationship"{d}only)'.format(d=D))
        entities, relations = parse_extraction_output(text)
        assert [e[0] for e in entities] == ["Alice"]
        assert relations == []

    def test_strength_fallbacks(self):
        _, relations = parse_extraction_output(_reply(_relation("A", "B", "x", "high"),
                                                      _relation("B", "C", "y", "-3")))
        assert [r[3] for r in relations] == [1.0, 0.0]

    def test_nothing_valid_raises(self):
        with pytest.raises(ExtractionParseError, match="no valid records"):
            parse_extraction_output("this is prose, not records")

    def test_empty_reply_without_marker_raises(self):
        with pytest.raises(ExtractionParseError, match="completion marker"):
            parse_extraction_output("")

    def test_empty_reply_with_marker(self):
        assert parse_extraction_output(DONE) == ([], [])

    def test_normalize_name(self):
        assert normalize_name("  New   York ") == "new york"


# ===================================================================
# Extraction
# ===================================================================

class TestExtraction:

    def test_empty_selection_costs_nothing(self, planted_store, llm, ledger):
        kg = extract_kg(set(), planted_store, llm)
        assert len(kg) == 0
        assert ledger.tokens(Stage.EXTRACTION) == {"input_tokens": 0, "output_tokens": 0}
        assert len(ledger) == 0

    def test_retry_with_reminder_then_success(self):
        store = store_from_texts(["Alice met Bob."])
        llm = ScriptedLLM(queue=["prose", _reply(_entity("Alice"), _entity("Bob"))])
        backbone = DelimitedExtractionBackbone(parallelism=1)
        kg = backbone.extract_kg(set(store.ids()), store, llm)
        assert set(kg.entities) == {"alice", "bob"}
        assert len(llm.prompts) == 2
        assert "could not be parsed" in llm.prompts[1]
        assert backbone.skipped_chunks == []

    def test_second_failure_skips_chunk(self):
        store = store_from_texts(["Alice met Bob.", "Carol stayed home."])
        ledger = CostLedger()
        llm = ScriptedLLM(by_text={"Carol stayed home.": _reply(_entity("Carol"))},
                          queue=["prose", "more prose"], ledger=ledger)
        backbone = DelimitedExtractionBackbone(parallelism=1)
        kg = backbone.extract_kg(set(store.ids()), store, llm)
        assert backbone.skipped_chunks == ["d00#c0000"]
        assert set(kg.entities) == {"carol"}
        assert len(ledger) == 3
        assert all(e.stage is Stage.EXTRACTION for e in ledger.entries)

    def test_merge_by_normalized_name(self):
        store = store_from_texts(["First text.", "Second text."])
        llm = ScriptedLLM(by_text={
            "First text.": _reply(_entity("Alice", "PERSON", "A sailor"), _entity("Bob"),
                                  _relation("Alice", "Bob", "crewmates", "2")),
            "Second text.": _reply(_entity("alice", "ORGANIZATION", "A captain"),
                                   _entity("ALICE", "PERSON", "A sailor"),
                                   _relation("Alice", "Bob", "crewmates", "3")),
        })
        kg = DelimitedExtractionBackbone(parallelism=2).extract_kg(set(store.ids()), store, llm)
        alice = kg.entities["alice"]
        assert alice.name == "Alice"
        assert alice.entity_type == "PERSON"
        assert alice.description == "A sailor A captain"
        assert alice.source_chunk_ids == ("d00#c0000", "d01#c0000")
        rel = kg.relations[("alice", "bob")]
        assert rel.weight == pytest.approx(5.0)
        assert rel.description == "crewmates"

    def test_unknown_relation_endpoint_gets_stub(self):
        store = store_from_texts(["Text."])
        llm = ScriptedLLM(queue=[_reply(_entity("Alice"), _relation("Alice", "Zed", "knows"))])
        kg = DelimitedExtractionBackbone(parallelism=1).extract_kg(set(store.ids()), store, llm)
        assert kg.entities["zed"].entity_type == "UNKNOWN"
        assert ("alice", "zed") in kg.relations

    def test_larger_selection_keeps_entities(self, planted_store, llm):
        ranked = planted_store.ids()
        small = extract_kg(set(ranked[:8]), planted_store, llm)
        large = extract_kg(set(ranked), planted_store, llm)
        assert set(small.entities) <= set(large.entities)
        assert len(small.entities) > 0

    def test_extraction_cost_scales_with_selection(self):
        store = store_from_texts([_ten_token_text(i) for i in range(200)])
        costs = {}
        for kappa, count in ((0.2, 40), (1.0, 200)):
            ledger = CostLedger()
            llm = MockLLMProvider(ProviderConfig(kind="mock", model_name="mock-llm"), ledger)
            extract_kg(set(store.ids()[:count]), store, llm)
            costs[kappa] = ledger.tokens(Stage.EXTRACTION)["input_tokens"]
        assert costs[0.2] / costs[1.0] <= 0.22

    def test_relation_with_unknown_endpoint_rejected_by_graph(self):
        with pytest.raises(ValueError, match="unknown endpoint"):
            KnowledgeGraph({}, [Relation("a", "b", "", 1.0, ())])

    def test_jsonl_round_trip(self, tmp_path, planted_store, llm, embedder):
        backbone = DelimitedExtractionBackbone()
        kg = backbone.embed_entities(backbone.extract_kg(set(planted_store.ids()[:5]), planted_store, llm),
                                     embedder)
        e_path, r_path = str(tmp_path / "e.jsonl"), str(tmp_path / "r.jsonl")
        kg.to_jsonl(e_path, r_path)
        loaded = KnowledgeGraph.from_jsonl(e_path, r_path)
        assert loaded.entities == kg.entities
        assert loaded.relations == kg.relations
        for eid, entity in kg.entities.items():
            assert np.array_equal(loaded.entities[eid].embedding, entity.embedding)


class TestEntitySerialization:

    def test_with_and_without_description(self):
        assert Entity("a", "Alice", "PERSON", "A sailor", ()).serialize() == "Alice: A sailor"
        assert Entity("a", "Alice", "PERSON", "", ()).serialize() == "Alice"


# ===================================================================
# Local search
# ===================================================================

class TestLocalSearch:

    def _setup(self):
        store = store_from_texts(["Small chunk text.", "A much longer chunk " + " ".join(["filler"] * 15) + "."])
        kg = _kg({"a": [1, 0, 0], "b": [0.6, 0.8, 0], "c": [0, 1, 0]},
                 relations=[("a", "b", 1.0)],
                 sources={"a": ["d00#c0000"], "b": ["d01#c0000"]})
        chunk_vectors = {"d00#c0000": np.array([0.0, 1.0, 0.0]), "d01#c0000": np.array([1.0, 0.0, 0.0])}
        return store, kg, chunk_vectors

    def test_emission_order(self):
        store, kg, chunk_vectors = self._setup()
        bundle = kg_local_search(kg, np.array([1.0, 0.0, 0.0]), 1000, 2, 0, store, chunk_vectors)
        assert [i.item_id for i in bundle] == ["entity:a", "entity:b", "relation:a|b",
                                              "d01#c0000", "d00#c0000"]
        assert [i.kind for i in bundle] == [KG_FACT, KG_FACT, KG_FACT, CHUNK, CHUNK]
        assert all(i.source == KG_PATH for i in bundle)
        assert bundle[2].text == "A —rel→ B"

    def test_stops_at_first_overflow(self):
        store, kg, chunk_vectors = self._setup()
        full = kg_local_search(kg, np.array([1.0, 0.0, 0.0]), 1000, 2, 0, store, chunk_vectors)
        # room for the facts and the small chunk, not for the large chunk ranked before it
        budget = sum(i.token_count for i in full[:3]) + store.get("d00#c0000").token_count
        bundle = kg_local_search(kg, np.array([1.0, 0.0, 0.0]), budget, 2, 0, store, chunk_vectors)
        assert [i.item_id for i in bundle] == ["entity:a", "entity:b", "relation:a|b"]
        assert bundle.total_tokens <= budget

    def test_budget_never_exceeded(self):
        store, kg, chunk_vectors = self._setup()
        for budget in range(1, 60):
            bundle = kg_local_search(kg, np.array([0.3, 0.7, 0.1]), budget, 3, 1, store, chunk_vectors)
            assert bundle.total_tokens <= budget

    def test_seeds_are_most_similar_entities(self):
        rng = np.random.default_rng(3)
        vectors = {f"e{i:02d}": rng.standard_normal(8) for i in range(15)}
        kg = _kg(vectors)
        query = rng.standard_normal(8)
        bundle = kg_local_search(kg, query, 10000, 4, 0)
        expected = sorted(vectors, key=lambda e: (-cosine(query, vectors[e]), e))[:4]
        assert [i.item_id for i in bundle] == [f"entity:{e}" for e in expected]

    def test_hops_expand_neighbourhood(self):
        kg = _kg({"a": [1, 0], "b": [0, 1], "c": [0, 1], "d": [0, 1]},
                 relations=[("a", "b", 1.0), ("b", "c", 1.0), ("c", "d", 1.0)])
        query = np.array([1.0, 0.0])

        def entities(hops):
            bundle = kg_local_search(kg, query, 10000, 1, hops)
            return {i.item_id for i in bundle if i.item_id.startswith("entity:")}

        assert entities(0) == {"entity:a"}
        assert entities(1) == {"entity:a", "entity:b"}
        assert entities(2) == {"entity:a", "entity:b", "entity:c"}

    def test_empty_graph(self):
        assert len(kg_local_search(KnowledgeGraph({}, []), np.ones(3), 100, 5, 1)) == 0

    def test_random_graphs_respect_budget_and_uniqueness(self):
        rng = random.Random(13)
        for _ in range(20):
            n = rng.randint(1, 10)
            vectors = {f"e{i}": [rng.uniform(-1, 1) for _ in range(4)] for i in range(n)}
            ids = list(vectors)
            relations = [(a, b, rng.uniform(0.1, 3)) for a in ids for b in ids if a < b and rng.random() < 0.3]
            kg = _kg(vectors, relations)
            budget = rng.randint(1, 80)
            bundle = kg_local_search(kg, np.array([rng.uniform(-1, 1) for _ in range(4)]), budget,
                                     rng.randint(1, 5), rng.randint(0, 2))
            keys = [i.key for i in bundle]
            assert len(keys) == len(set(keys))
            assert bundle.total_tokens <= budget
