"""Hand-scored relaxed-accuracy fixture shared by unit and acceptance tests."""

# (prediction, ground truth, verdicts at 0.05 / 0.10 / 0.20), scored by hand
HAND_SCORED = [
    ("95", "100", (True, True, True)),
    ("94.9", "100", (False, True, True)),
    ("It is between 2003 and 2005", "(2003, 2005)", (False, False, False)),
    ("Apple.", "apple", (True, True, True)),
    ("89", "100", (False, False, True)),
    ("79", "100", (False, False, False)),
    ("1,050", "1000", (True, True, True)),
    ("45%", "45", (True, True, True)),
    ("The answer is 12.5", "12", (True, True, True)),
    ("0.04", "0", (True, True, True)),
    ("0.15", "0", (False, False, True)),
    ("-10", "10", (False, False, False)),
    ("no idea", "7", (False, False, False)),
    ("  New   York ", "new york", (True, True, True)),
    ("Yes!", "yes", (True, True, True)),
    ("yes", "no", (False, False, False)),
    ("108", "100", (False, True, True)),
    ("2003", "2003", (True, True, True)),
    ("2,500", "2,000", (False, False, False)),
    ("-0.5", "-0.45", (False, False, True)),
]
