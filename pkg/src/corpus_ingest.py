"""
Concept RAG - Corpus Ingest Module
Loads JSONL corpora, splits documents into sentences and token-bounded chunks
"""

import json
import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

from config import Config, CorpusError, DuplicateDocumentError

logger = logging.getLogger(__name__)


# ============================================
# TOKEN COUNTING
# ============================================

_WORD_TOKEN = re.compile(r"\w+|[^\w\s]")


class WordTokenCounter:
    """Default counter: one token per run of word characters or per punctuation mark"""
    name = "words"

    def count(self, text: str) -> int:
        if not text:
            return 0
        return sum(1 for _ in _WORD_TOKEN.finditer(text))


class TiktokenCounter:
    """BPE counter backed by tiktoken (e.g. cl100k_base)"""

    def __init__(self, encoding: str = "cl100k_base"):
        import tiktoken
        self.name = f"tiktoken:{encoding}"
        self._enc = tiktoken.get_encoding(encoding)

    def count(self, text: str) -> int:
        if not text:
            return 0
        return len(self._enc.encode(text, disallowed_special=()))


class HFTokenCounter:
    """Counter backed by a Hugging Face tokenizer, loaded lazily"""

    def __init__(self, model: str):
        try:
            from transformers import AutoTokenizer
        except ImportError:
            logger.error("transformers not installed, cannot use a Hugging Face tokenizer")
            raise
        self.name = f"hf:{model}"
        self._tok = AutoTokenizer.from_pretrained(model)

    def count(self, text: str) -> int:
        if not text:
            return 0
        return len(self._tok.encode(text, add_special_tokens=False))


@lru_cache(maxsize=8)
def get_token_counter(spec: str = "words"):
    """Resolve a counter spec: 'words', 'tiktoken:<encoding>' or 'hf:<model>'"""
    if spec in ("words", "", None):
        return WordTokenCounter()
    if spec.startswith("tiktoken"):
        _, _, encoding = spec.partition(":")
        return TiktokenCounter(encoding or "cl100k_base")
    if spec.startswith("hf:"):
        return HFTokenCounter(spec[3:])
    raise ValueError(f"unknown tokenizer spec {spec!r}")


def count_tokens(text: str, counter=None) -> int:
    """Count tokens with the given counter (word/punctuation counter by default)"""
    return (counter or get_token_counter("words")).count(text)


# ============================================
# SENTENCE SPLITTING
# ============================================

ABBREVIATIONS = {
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "ft", "vs", "etc",
    "e.g", "i.e", "cf", "al", "inc", "ltd", "co", "corp", "no", "vol", "fig",
    "gen", "gov", "sen", "rep", "col", "lt", "capt", "sgt", "rev", "hon",
    "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec",
    "u.s", "u.k", "approx", "dept", "est", "ca",
}

# terminal punctuation (plus closing quotes/brackets), whitespace, then an uppercase
# letter or an opening quote/bracket
_BOUNDARY = re.compile(r"[.!?]+[\"')\]”’]*(?=\s+[A-Z\"'(\[“‘])")
_LAST_WORD = re.compile(r"(\S+)$")


def split_sentences(text: str) -> List[str]:
    """
    Split text into sentences at terminal punctuation followed by whitespace and
    an uppercase letter or opening quote. Abbreviations in ABBREVIATIONS do not end
    a sentence. Deterministic; empty input gives an empty list.
    """
    if not text or not text.strip():
        return []
    sentences = []
    start = 0
    for match in _BOUNDARY.finditer(text):
        punct = match.group(0)
        if punct.startswith(".") and punct.rstrip("\"')]”’") == ".":
            word = _LAST_WORD.search(text[start:match.start()])
            if word and word.group(1).lower().rstrip(".") in ABBREVIATIONS:
                continue
        piece = text[start:match.end()].strip()
        if piece:
            sentences.append(piece)
        start = match.end()
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


# ============================================
# DOMAIN TYPES
# ============================================

@dataclass(frozen=True)
class Document:
    """One corpus record"""
    doc_id: str
    title: str
    text: str


@dataclass(frozen=True)
class Sentence:
    sent_id: str
    chunk_id: str
    text: str
    ordinal: int
    start: int    # character offset inside the chunk text
    end: int


@dataclass(frozen=True)
class Chunk:
    """A contiguous text segment, the unit of selection and context assembly"""
    chunk_id: str
    doc_id: str
    ordinal: int
    text: str
    token_count: int
    sentences: Tuple[Sentence, ...]

    def to_record(self) -> dict:
        spans = []
        for s in self.sentences:
            byte_start = len(self.text[:s.start].encode("utf-8"))
            byte_end = byte_start + len(s.text.encode("utf-8"))
            spans.append([byte_start, byte_end])
        return {
            "chunk_id": self.chunk_id,
            "doc_id": self.doc_id,
            "ordinal": self.ordinal,
            "text": self.text,
            "token_count": self.token_count,
            "sentence_spans": spans,
        }

    @classmethod
    def from_record(cls, record: dict) -> "Chunk":
        text = record["text"]
        raw = text.encode("utf-8")
        sentences = []
        for i, (b0, b1) in enumerate(record["sentence_spans"]):
            start = len(raw[:b0].decode("utf-8"))
            sent_text = raw[b0:b1].decode("utf-8")
            sentences.append(Sentence(
                sent_id=make_sentence_id(record["chunk_id"], i),
                chunk_id=record["chunk_id"],
                text=sent_text,
                ordinal=i,
                start=start,
                end=start + len(sent_text),
            ))
        return cls(
            chunk_id=record["chunk_id"],
            doc_id=record["doc_id"],
            ordinal=record["ordinal"],
            text=text,
            token_count=record["token_count"],
            sentences=tuple(sentences),
        )


def make_chunk_id(doc_id: str, ordinal: int) -> str:
    return f"{doc_id}#c{ordinal:04d}"


def make_sentence_id(chunk_id: str, ordinal: int) -> str:
    return f"{chunk_id}#s{ordinal:03d}"


class ChunkStore:
    """Read-only, ordered collection of chunks indexed by chunk_id"""

    def __init__(self, chunks: Iterable[Chunk] = (), counter_name: str = "words",
                 ingest_errors: Optional[List[str]] = None):
        self._chunks: Dict[str, Chunk] = {}
        for chunk in chunks:
            if chunk.chunk_id in self._chunks:
                raise CorpusError(f"duplicate chunk id {chunk.chunk_id}")
            self._chunks[chunk.chunk_id] = chunk
        self._sentences: Dict[str, Sentence] = {
            s.sent_id: s for c in self._chunks.values() for s in c.sentences
        }
        self.counter_name = counter_name
        self.ingest_errors = list(ingest_errors or [])

    def __len__(self) -> int:
        return len(self._chunks)

    def __iter__(self) -> Iterator[Chunk]:
        return iter(self._chunks.values())

    def __contains__(self, chunk_id: str) -> bool:
        return chunk_id in self._chunks

    def get(self, chunk_id: str) -> Chunk:
        return self._chunks[chunk_id]

    def ids(self) -> List[str]:
        return list(self._chunks)

    def sentence(self, sent_id: str) -> Sentence:
        return self._sentences[sent_id]

    @property
    def total_tokens(self) -> int:
        return sum(c.token_count for c in self._chunks.values())

    @property
    def max_chunk_tokens(self) -> int:
        return max((c.token_count for c in self._chunks.values()), default=0)

    def subset(self, chunk_ids: Iterable[str]) -> "ChunkStore":
        """Store restricted to the given ids, keeping corpus order"""
        keep = set(chunk_ids)
        return ChunkStore((c for c in self if c.chunk_id in keep), self.counter_name)

    def to_jsonl(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            for chunk in self:
                f.write(json.dumps(chunk.to_record(), ensure_ascii=False, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path: str, counter_name: str = "words") -> "ChunkStore":
        chunks = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    chunks.append(Chunk.from_record(json.loads(line)))
        return cls(chunks, counter_name)


# ============================================
# CHUNKING
# ============================================

def _hard_split(sentence: str, limit: int, counter) -> List[str]:
    """Split an over-long sentence at word boundaries (characters as a last resort)"""
    pieces: List[str] = []
    current: List[str] = []
    for word in sentence.split():
        candidate = " ".join(current + [word])
        if counter.count(candidate) <= limit:
            current.append(word)
            continue
        if current:
            pieces.append(" ".join(current))
            current = []
        if counter.count(word) <= limit:
            current = [word]
            continue
        # a single word over the limit
        buf = ""
        for ch in word:
            if buf and counter.count(buf + ch) > limit:
                pieces.append(buf)
                buf = ""
            buf += ch
        if buf:
            current = [buf]
    if current:
        pieces.append(" ".join(current))
    return pieces


def chunk_document(doc: Document, limit: int, counter=None) -> List[Chunk]:
    """Greedy sentence packing: add whole sentences while the chunk stays within `limit` tokens"""
    counter = counter or get_token_counter("words")
    pieces: List[str] = []
    for sent in split_sentences(doc.text):
        sent = normalize_whitespace(sent)
        if counter.count(sent) > limit:
            pieces.extend(_hard_split(sent, limit, counter))
        else:
            pieces.append(sent)

    groups: List[List[str]] = []
    current: List[str] = []
    for piece in pieces:
        if current and counter.count(" ".join(current + [piece])) > limit:
            groups.append(current)
            current = []
        current.append(piece)
    if current:
        groups.append(current)

    chunks = []
    for ordinal, group in enumerate(groups):
        chunk_id = make_chunk_id(doc.doc_id, ordinal)
        sentences = []
        offset = 0
        for i, sent_text in enumerate(group):
            sentences.append(Sentence(
                sent_id=make_sentence_id(chunk_id, i),
                chunk_id=chunk_id,
                text=sent_text,
                ordinal=i,
                start=offset,
                end=offset + len(sent_text),
            ))
            offset += len(sent_text) + 1
        text = " ".join(group)
        chunks.append(Chunk(
            chunk_id=chunk_id,
            doc_id=doc.doc_id,
            ordinal=ordinal,
            text=text,
            token_count=counter.count(text),
            sentences=tuple(sentences),
        ))
    return chunks


def _parse_document(line: str, line_number: int) -> Document:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise CorpusError(f"invalid JSON ({e.msg})", line_number)
    if not isinstance(record, dict):
        raise CorpusError("record is not a JSON object", line_number)
    doc_id = record.get("doc_id")
    text = record.get("text")
    title = record.get("title") or ""
    if not isinstance(doc_id, str) or not doc_id:
        raise CorpusError("missing or empty doc_id", line_number)
    if not isinstance(text, str) or not text.strip():
        raise CorpusError(f"document {doc_id} has empty text", line_number)
    if not isinstance(title, str):
        raise CorpusError(f"document {doc_id} has a non-string title", line_number)
    return Document(doc_id=doc_id, title=title, text=text)


def read_documents(source: str, strict: bool = False) -> Tuple[List[Document], List[str]]:
    """Read a corpus JSONL file. Malformed lines are reported and skipped unless strict."""
    documents: List[Document] = []
    errors: List[str] = []
    seen = set()
    with open(source, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                doc = _parse_document(line, line_number)
            except CorpusError as e:
                if strict:
                    raise
                logger.warning(f"Skipping malformed corpus line: {e}")
                errors.append(str(e))
                continue
            if doc.doc_id in seen:
                raise DuplicateDocumentError(f"duplicate doc_id {doc.doc_id!r}", line_number)
            seen.add(doc.doc_id)
            documents.append(doc)
    return documents, errors


def ingest_corpus(source: str, config: Config) -> ChunkStore:
    """
    Load a corpus file and decompose every document into chunks of at most
    config.chunk_size_tokens tokens, preserving document order.

    Args:
        source: Path to a JSONL file with doc_id/title/text per line
        config: Effective configuration (chunk size, tokenizer, strict mode)

    Returns:
        The chunk store indexed by chunk_id
    """
    if config.chunk_size_tokens <= 0:
        raise CorpusError("chunk_size_tokens must be > 0")
    counter = get_token_counter(config.tokenizer)
    documents, errors = read_documents(source, strict=config.strict)
    chunks: List[Chunk] = []
    for doc in documents:
        chunks.extend(chunk_document(doc, config.chunk_size_tokens, counter))
    store = ChunkStore(chunks, counter.name, errors)
    logger.info(f"Ingested {len(documents)} documents into {len(store)} chunks "
                f"({store.total_tokens} tokens, {len(errors)} malformed lines)")
    return store


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    sample = "Dr. Smith left. He returned! Did he stay? \"Yes,\" said Mrs. Jones."
    for s in split_sentences(sample):
        print(f"  • {s}")
