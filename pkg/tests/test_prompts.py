"""Tests for prompt rendering and section markers."""

import prompts


def test_extraction_prompt_carries_template_and_text():
    prompt = prompts.render_extraction_prompt("Alice met Bob.")
    assert prompts.detect_template(prompt) == prompts.TEMPLATE_EXTRACTION
    assert prompts.extract_section(prompt, "INPUT_TEXT") == "Alice met Bob."
    assert prompts.TUPLE_DELIMITER in prompt
    assert prompts.COMPLETION_DELIMITER in prompt


def test_reminder_is_appended():
    plain = prompts.render_extraction_prompt("x")
    reminded = prompts.render_extraction_prompt("x", reminder=True)
    assert reminded.startswith(plain)
    assert "could not be parsed" in reminded


def test_answer_prompt_sections():
    prompt = prompts.render_answer_prompt("Who?", "line one\n\nline two")
    assert prompts.detect_template(prompt) == prompts.TEMPLATE_ANSWER
    assert prompts.extract_section(prompt, "QUESTION") == "Who?"
    assert prompts.extract_section(prompt, "CONTEXT") == "line one\n\nline two"


def test_unknown_prompt():
    assert prompts.detect_template("just text") is None
    assert prompts.extract_section("just text", "CONTEXT") == ""
