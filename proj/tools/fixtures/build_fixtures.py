#!/usr/bin/env python3
"""Regenerates the bundled fixture data under data/.

Inputs: a cmudict.dict file in the lowercase distribution format (as shipped
by the `cmudict` Python package). Outputs are deterministic for a fixed seed.

    python3 tools/fixtures/build_fixtures.py --cmudict /path/to/cmudict.dict
"""
import argparse
import json
import random
from pathlib import Path

RHYME_FAMILIES = [
    "night light bright fright sight flight might white right tight kite bite",
    "fear near clear dear year appear here cheer steer spear",
    "doom room bloom gloom tomb loom broom groom",
    "dread bed red head said bread thread fled spread led",
    "bliss kiss miss abyss",
    "joy toy boy coy ploy destroy employ",
    "dark park mark spark bark lark stark",
    "grief leaf brief chief belief thief reef",
    "pain rain plain chain lane vain main gain train",
    "all call fall hall small wall tall ball",
    "day way play stay gray say may away",
    "sea free tree me see be key",
    "snow go slow glow flow know below grow",
    "ground sound found round bound around",
    "love above dove glove",
    "shine line mine fine pine wine divine sign",
    "bell well tell fell spell shell dwell",
    "sing spring ring king wing thing bring",
    "door floor more shore store before core",
    "fate gate late great wait state weight",
    "side wide tide pride ride hide guide",
    "heart art part start apart chart smart",
    "rest best nest west chest test quest",
    "dream stream gleam beam seem team cream",
    "back track black crack lack pack",
    "sky high fly cry why try sigh",
    "moon soon tune june noon spoon",
    "cold gold old bold hold told fold",
    "home foam roam dome comb",
    "fire tire wire desire higher choir",
]

TOPICS = {
    "weather": ["The storm", "A cloud", "The wind", "The morning rain", "A silver frost"],
    "love": ["My heart", "Her smile", "His voice", "Our promise", "The letter"],
    "sea": ["The ship", "A sailor", "The tide", "The harbor", "A gull"],
    "night": ["The moon", "A candle", "The owl", "The quiet street", "A lantern"],
    "childhood": ["The children", "A puppy", "The old swing", "My brother", "The schoolyard"],
    "war": ["The soldier", "A banner", "The captain", "The drum", "A distant horn"],
    "city": ["The tower", "A taxi", "The market", "The subway", "A crowded square"],
    "forest": ["The deer", "A fox", "The old oak", "The river", "A hidden path"],
    "time": ["The clock", "An hour", "The season", "A memory", "The calendar"],
    "music": ["The violin", "A melody", "The singer", "The piano", "A quiet song"],
}

LINE1_FRAMES = [
    "{subj} was waiting in the {w}",
    "{subj} would always speak of {w}",
    "{subj} had wandered toward the {w}",
    "{subj} was filled with quiet {w}",
    "{subj} looked out across the {w}",
    "{subj} had never known such {w}",
    "{subj} was lost inside the {w}",
    "{subj} kept dreaming of the {w}",
]
LINE2_FRAMES = [
    "and hoped that it would find the {w}",
    "until at last it reached the {w}",
    "as though the world had lost its {w}",
    "and then we saw a single {w}",
    "when suddenly there came a {w}",
    "and all of us could feel the {w}",
    "while far away there shone a {w}",
    "but no one ever knew the {w}",
]

PROMPT_PAIRS = [
    {"pair_id": "doom-dread", "template": "A rhyming couplet:\nThe hall was filled with silent {word},\nwhen suddenly they",
     "clean_word": "doom", "corrupt_word": "dread"},
    {"pair_id": "bliss-joy", "template": "A rhyming couplet:\nThe children laughed in {word},\nuntil they all",
     "clean_word": "bliss", "corrupt_word": "joy"},
    {"pair_id": "dark-night", "template": "A rhyming couplet:\nShe wandered home alone into the {word},\nand then she",
     "clean_word": "dark", "corrupt_word": "night"},
    {"pair_id": "grief-pain", "template": "A rhyming couplet:\nI never knew the depth of such {word},\nas though the",
     "clean_word": "grief", "corrupt_word": "pain"},
    {"pair_id": "fright-fear", "template": "A rhyming couplet:\nShe felt a sudden sense of {word},\nand hoped that",
     "clean_word": "fright", "corrupt_word": "fear"},
]

DONOR = "The weather outside is warm and sunny today, and the birds are singing."

CORPUS_SUBJECTS = ["The committee", "A farmer", "The engineer", "Our neighbor", "The report",
                   "A small company", "The library", "The museum", "A teacher", "The river",
                   "The village", "A traveler", "The council", "The garden", "A student"]
CORPUS_VERBS = ["described", "announced", "repaired", "visited", "studied", "measured",
                "painted", "collected", "opened", "reviewed", "planned", "finished"]
CORPUS_OBJECTS = ["the old bridge", "a new road", "the annual budget", "the northern field",
                  "a broken window", "the winter market", "a long letter", "the morning train",
                  "the empty house", "a bright lamp", "the stone wall", "a quiet meeting",
                  "the water supply", "the school garden", "a wooden boat"]
CORPUS_TAILS = ["", " after the storm", " before the holiday", " with great care",
                " during the summer", " in the small town", " for the first time",
                " without much help", " near the harbor", " at the end of the day"]


def load_cmudict(path):
    lex = {}
    for line in open(path, encoding="utf-8"):
        line = line.split("#")[0].strip()
        if not line:
            continue
        word, *phones = line.split()
        lex.setdefault(word.split("(")[0], []).append(phones)
    return lex


def rhyme_keys(lex, word):
    keys = set()
    for phones in lex.get(word.lower(), []):
        idx = [i for i, p in enumerate(phones) if p[-1] in "12"]
        if not idx:
            idx = [i for i, p in enumerate(phones) if p[-1].isdigit()]
        keys.add(tuple(p.rstrip("012") for p in phones[idx[-1]:]))
    return keys


def write_cmudict_07b(lex_path, out_path):
    with open(out_path, "w", encoding="latin-1") as out:
        out.write(";;; CMU Pronouncing Dictionary, converted to the 0.7b plain-text layout.\n")
        out.write(";;; Source: cmudict distribution (BSD-style license, see data/CMUDICT_LICENSE).\n")
        for line in open(lex_path, encoding="utf-8"):
            line = line.split("#")[0].strip()
            if not line:
                continue
            word, *phones = line.split()
            out.write(word.upper() + "  " + " ".join(phones) + "\n")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cmudict", required=True)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[2] / "data"))
    ap.add_argument("--seed", type=int, default=20260214)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(args.seed)

    lex = load_cmudict(args.cmudict)
    write_cmudict_07b(args.cmudict, out / "cmudict-0.7b")

    families = []
    for fam in RHYME_FAMILIES:
        words = [w for w in fam.split() if w in lex]
        anchor = rhyme_keys(lex, words[0])
        words = [w for w in words if rhyme_keys(lex, w) & anchor]
        if len(words) >= 3:
            families.append(words)

    couplets = []
    seen = set()
    while len(couplets) < 1200:
        fam = rng.choice(families)
        r1, r2 = rng.sample(fam, 2)
        topic = rng.choice(sorted(TOPICS))
        subj = rng.choice(TOPICS[topic])
        line1 = rng.choice(LINE1_FRAMES).format(subj=subj, w=r1) + ","
        line2 = rng.choice(LINE2_FRAMES).format(w=r2) + "."
        if (line1, line2) in seen:
            continue
        seen.add((line1, line2))
        couplets.append({"line1": line1, "line2": line2, "r1": r1, "r2": r2, "topic": topic})
    rng.shuffle(couplets)
    with open(out / "couplets.jsonl", "w", encoding="utf-8") as f:
        for i, c in enumerate(couplets):
            c = {"id": f"c{i:04d}", **c, "split": "train" if i < 1000 else "validation"}
            f.write(json.dumps(c, sort_keys=True) + "\n")

    with open(out / "prompt_pairs.jsonl", "w", encoding="utf-8") as f:
        for p in PROMPT_PAIRS:
            f.write(json.dumps(p, sort_keys=True) + "\n")

    docs = []
    for i in range(1500):
        n = rng.randint(2, 6)
        sents = []
        for _ in range(n):
            sents.append(f"{rng.choice(CORPUS_SUBJECTS)} {rng.choice(CORPUS_VERBS)} "
                         f"{rng.choice(CORPUS_OBJECTS)}{rng.choice(CORPUS_TAILS)}.")
        docs.append({"doc_id": f"d{i:04d}", "text": " ".join(sents)})
    with open(out / "general_corpus.jsonl", "w", encoding="utf-8") as f:
        for d in docs:
            f.write(json.dumps(d, sort_keys=True) + "\n")

    words = set()
    def add_text(t):
        for tok in t.replace("\n", " ").split():
            w = tok.strip(".,:;!?\"'")
            if w:
                words.add(w)
    for c in couplets:
        add_text(c["line1"]); add_text(c["line2"])
    for p in PROMPT_PAIRS:
        add_text(p["template"].replace("{word}", p["clean_word"]))
        add_text(p["corrupt_word"])
    for d in docs:
        add_text(d["text"])
    add_text(DONOR)
    for fam in families:
        words.update(fam)
    with open(out / "toy_vocab.txt", "w", encoding="utf-8") as f:
        for w in sorted(words):
            f.write(w + "\n")
    print(f"{len(families)} rhyme families, {len(couplets)} couplets, {len(docs)} documents, {len(words)} vocabulary words")


if __name__ == "__main__":
    main()
