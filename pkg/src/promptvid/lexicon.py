"""Word lists shared by the caption parser, the synthetic generator and the default vocabulary."""

SUBJECT_CLASSES = ("dog", "cat", "bear", "car", "panda", "tiger", "horse", "elephant", "lion")

# Parseable nouns that the keyword filter rejects.
EXTRA_NOUNS = ("bird", "boat", "tree", "house", "person", "rabbit")

NOUNS = SUBJECT_CLASSES + EXTRA_NOUNS

DETERMINERS = ("a", "an", "the", "this", "that", "one", "some", "my", "his", "her", "their")

# Pre-nominal modifiers: adjectives plus breed/compound words such as "papillon".
MODIFIERS = (
    "papillon", "golden", "red", "blue", "green", "black", "white", "brown", "spotted", "striped",
    "happy", "young", "cute", "fluffy", "playful", "lonely", "curious", "old", "wild", "sleepy",
    "brave", "little", "big", "small", "shiny", "toy",
)

# Adjectives the generator puts in captions; none of them describe colour or size.
CAPTION_ADJECTIVES = ("happy", "young", "cute", "playful", "curious", "wild", "sleepy", "brave")

# Verb phrase -> unit motion direction (dx, dy) in pixels per frame.
VERB_PHRASES = {
    "runs to the left": (-1, 0),
    "walks to the right": (1, 0),
    "jumps up": (0, -1),
    "slides down": (0, 1),
    "stays still": (0, 0),
}

OTHER_WORDS = (
    "celebrates", "birthday", "with", "gifts", "sunset", "over", "ocean", "drives", "fast",
    "in", "on", "park", "road", "and", "is", "at", "of",
)

NULL_TOKEN = "<null>"
UNK_TOKEN = "<unk>"


def default_vocabulary() -> list[str]:
    words = set(NOUNS) | set(DETERMINERS) | set(MODIFIERS) | set(OTHER_WORDS)
    for phrase in VERB_PHRASES:
        words.update(phrase.split())
    return [NULL_TOKEN, UNK_TOKEN] + sorted(words)
