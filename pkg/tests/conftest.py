"""Shared fixtures: synthetic corpora, mock providers and the planted-fact set."""

import json
import os
import sys

import pytest

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "src"))

from config import Config, ProviderConfig  # noqa: E402
from corpus_ingest import ChunkStore, Document, chunk_document  # noqa: E402
from cost_ledger import CostLedger  # noqa: E402
from providers import MockEmbeddingProvider, MockLLMProvider  # noqa: E402


# ===================================================================
# Planted-fact corpus: every planted document answers exactly one question
# ===================================================================

PLANTED = [
    ("Velmora Quay", "harbor", "lantern regatta", "amber"),
    ("Tarnholt Abbey", "monastery", "honey festival", "beeswax"),
    ("Quillon Ridge", "observatory", "comet vigil", "telescopes"),
    ("Brisca Vale", "vineyard", "grape stomping contest", "barrels"),
    ("Marrowick Hall", "library", "manuscript auction", "vellum"),
    ("Selden Crossing", "bridge", "kite tournament", "ribbons"),
    ("Orvane Point", "lighthouse", "fog choir", "lenses"),
    ("Kestrel Moor", "heath", "falconry trial", "gauntlets"),
    ("Dunmere Works", "foundry", "bell casting fair", "bronze"),
    ("Pellory Gardens", "arboretum", "orchid show", "greenhouses"),
    ("Havrick Station", "depot", "steam parade", "locomotives"),
    ("Ismore Lodge", "cabin", "snowshoe marathon", "pine"),
    ("Calder Reach", "canal", "barge race", "locks"),
    ("Wyncombe Mill", "granary", "bread tasting", "flour"),
    ("Ferrow Isle", "island", "seal census", "beaches"),
    ("Gallant Spire", "cathedral", "organ recital", "pipes"),
    ("Nethercott Yard", "shipyard", "hull launching", "timber"),
    ("Rookwell Market", "bazaar", "spice auction", "saffron"),
    ("Aldervane Court", "theater", "puppet premiere", "marionettes"),
    ("Sorrel Basin", "reservoir", "rowing sprint", "oars"),
]

FILLER = [
    "Rain fell across the valley for most of the week. Farmers waited for drier soil before planting.",
    "A good soup starts with onions cooked slowly in butter. Stock and herbs follow later.",
    "Old maps often exaggerate the size of distant mountains. Surveyors corrected many errors.",
    "The committee met twice to discuss the budget. Nobody agreed on the final numbers.",
    "Migrating geese fly in long lines across the evening sky. Their calls carry for miles.",
    "Paper mills once lined the river banks. Most closed when the railway arrived.",
    "Children learned arithmetic with wooden counting frames. Teachers kept them polished.",
    "The ferry schedule changes with the tides. Passengers check the board each morning.",
    "Quarry stone was carted to the town square. Masons shaped each block by hand.",
    "Winter evenings were spent mending nets by the fire. Stories passed the long hours.",
]


def planted_text(name: str, kind: str, event: str, detail: str) -> str:
    return (f"{name} is a quiet {kind} beside the northern road. "
            f"Every autumn the {kind} of {name} hosts the {event}, famous for its {detail}. "
            f"Travelers describe the {event} with warm affection. "
            f"ANSWER_SPAN: {name}.")


def planted_question(kind: str, event: str) -> str:
    return f"Which {kind} hosts the {event}?"


def planted_documents():
    docs = []
    for i, (name, kind, event, detail) in enumerate(PLANTED):
        docs.append({"doc_id": f"p{i:02d}", "title": name, "text": planted_text(name, kind, event, detail)})
    for i, text in enumerate(FILLER):
        docs.append({"doc_id": f"f{i:02d}", "title": "", "text": text})
    return docs


def planted_qa():
    return [
        {"query_id": f"q{i:02d}", "question": planted_question(kind, event),
         "answers": [name], "supporting_chunk_ids": [f"p{i:02d}#c0000"]}
        for i, (name, kind, event, _) in enumerate(PLANTED)
    ]


def write_jsonl(path, records) -> str:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")
    return str(path)


def store_from_texts(texts, limit: int = 1200) -> ChunkStore:
    """One document per text, ids d00, d01, ..."""
    chunks = []
    for i, text in enumerate(texts):
        chunks.extend(chunk_document(Document(f"d{i:02d}", "", text), limit))
    return ChunkStore(chunks)


# ===================================================================
# Fixtures
# ===================================================================

@pytest.fixture
def ledger():
    return CostLedger()


@pytest.fixture
def embedder(ledger):
    return MockEmbeddingProvider(ProviderConfig(kind="mock", model_name="semantic-mock", dim=64),
                                 ledger, seed=42)


@pytest.fixture
def llm(ledger):
    return MockLLMProvider(ProviderConfig(kind="mock", model_name="mock-llm", dim=1), ledger)


@pytest.fixture
def planted_store():
    return ChunkStore([c for d in planted_documents()
                       for c in chunk_document(Document(d["doc_id"], d["title"], d["text"]), 1200)])


@pytest.fixture
def planted_files(tmp_path):
    corpus = write_jsonl(tmp_path / "corpus.jsonl", planted_documents())
    qa = write_jsonl(tmp_path / "qa.jsonl", planted_qa())
    return corpus, qa


@pytest.fixture
def index_config(tmp_path):
    return Config(index_dir=str(tmp_path / "index"))
