"""Shared reference fixture: the worked combined-sequence example.

One question, five classifier hints with probabilities, one generative
hint, and the exact combined sequence they must produce. Used by the
fusion tests, the CLI tests, and the acceptance suite.
"""

from convqa.fusion import HintSet

QUESTION = "What are put on the table next to the woman in red shirt?"

CLASSIFIER_HINTS = [
    ("fruit", 0.1568),
    ("bananas", 0.1338),
    ("food", 0.0899),
    ("berries", 0.0786),
    ("carrots", 0.0655),
]

GENERATIVE_HINT = "pineapples"


def hint_set():
    return HintSet(classifier_hints=list(CLASSIFIER_HINTS),
                   generative_hint=GENERATIVE_HINT)


COMBINED_TEXT = (
    "<sos> what are put on the table next to the woman in red shirt"
    " <sep> fruit fruit fruit fruit fruit fruit fruit"
    " bananas bananas bananas bananas bananas bananas"
    " food food food food berries berries berries carrots carrots carrots"
    " <sep> pineapples pineapples pineapples pineapples pineapples"
    " pineapples pineapples pineapples pineapples pineapples <eos>"
)
