"""
Concept RAG - Prompt Templates
Extraction and answering prompts. Every template starts with a template-id line
and wraps its variable parts in BEGIN/END markers so responses can be scripted offline.
"""

import re
from typing import Optional

TUPLE_DELIMITER = "<|>"
RECORD_DELIMITER = "##"
COMPLETION_DELIMITER = "<|COMPLETE|>"

TEMPLATE_EXTRACTION = "entity_extraction"
TEMPLATE_ANSWER = "answer_question"

EXTRACTION_PROMPT = """# template: entity_extraction
-Goal-
Given a text document, identify all entities in the text and all relationships among the identified entities.

-Steps-
1. Identify all entities. For each entity, extract:
- entity_name: name of the entity, capitalized as in the text
- entity_type: a short type label such as PERSON, ORGANIZATION, LOCATION, EVENT or CONCEPT
- entity_description: comprehensive description of the entity's attributes and activities
Format each entity as ("entity"{tuple_delimiter}<entity_name>{tuple_delimiter}<entity_type>{tuple_delimiter}<entity_description>)

2. From the entities identified in step 1, identify all pairs of (source_entity, target_entity) that are clearly related.
For each pair, extract:
- source_entity, target_entity: names as identified in step 1
- relationship_description: why the two entities are related
- relationship_strength: a numeric score for the strength of the relationship
Format each relationship as ("relationship"{tuple_delimiter}<source_entity>{tuple_delimiter}<target_entity>{tuple_delimiter}<relationship_description>{tuple_delimiter}<relationship_strength>)

3. Return output as a single list of all entities and relationships, using **{record_delimiter}** as the list delimiter.

4. When finished, output {completion_delimiter}

-Real Data-
BEGIN INPUT_TEXT
{input_text}
END INPUT_TEXT
Output:"""

FORMAT_REMINDER = """

Your previous answer could not be parsed. Reply ONLY with records in the exact format
("entity"{tuple_delimiter}...) and ("relationship"{tuple_delimiter}...), separated by {record_delimiter}, ending with {completion_delimiter}."""

ANSWER_PROMPT = """# template: answer_question
Answer the question using only the context below. Reply with the shortest possible answer span, no explanation.

BEGIN CONTEXT
{context}
END CONTEXT

BEGIN QUESTION
{question}
END QUESTION
Answer:"""

_TEMPLATE_LINE = re.compile(r"^# template: (\w+)", re.MULTILINE)


def render_extraction_prompt(text: str, reminder: bool = False) -> str:
    prompt = EXTRACTION_PROMPT.format(
        tuple_delimiter=TUPLE_DELIMITER,
        record_delimiter=RECORD_DELIMITER,
        completion_delimiter=COMPLETION_DELIMITER,
        input_text=text,
    )
    if reminder:
        prompt += FORMAT_REMINDER.format(
            tuple_delimiter=TUPLE_DELIMITER,
            record_delimiter=RECORD_DELIMITER,
            completion_delimiter=COMPLETION_DELIMITER,
        )
    return prompt


def render_answer_prompt(question: str, context: str) -> str:
    return ANSWER_PROMPT.format(question=question, context=context)


def detect_template(prompt: str) -> Optional[str]:
    match = _TEMPLATE_LINE.search(prompt)
    return match.group(1) if match else None


def extract_section(prompt: str, name: str) -> str:
    """Text between 'BEGIN <name>' and 'END <name>' marker lines, '' when absent"""
    match = re.search(rf"^BEGIN {name}\n(.*?)\n?END {name}$", prompt, re.MULTILINE | re.DOTALL)
    return match.group(1) if match else ""
