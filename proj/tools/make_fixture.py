#!/usr/bin/env python3
"""Writes data/fixture.txt: seeded, grammar-generated English-like prose."""

import argparse
import random

SUBJECTS = ["the miller", "a sailor", "the old woman", "my brother", "the king", "a small dog",
            "the farmer", "her daughter", "the captain", "a stranger", "the priest", "the boy"]
VERBS = ["saw", "found", "carried", "followed", "called", "remembered", "watched", "lost",
         "painted", "mended", "sold", "feared"]
OBJECTS = ["the lantern", "a red boat", "the river", "an empty house", "the long road",
           "a basket of apples", "the north wind", "his own shadow", "the bell", "a letter"]
PLACES = ["by the mill", "in the morning", "after the storm", "near the harbour",
          "under the bridge", "at the market", "before supper", "on the hill"]
JOINERS = ["and then", "but", "so", "while", "because"]


def sentence(rng):
    s = f"{rng.choice(SUBJECTS)} {rng.choice(VERBS)} {rng.choice(OBJECTS)}"
    if rng.random() < 0.6:
        s += f" {rng.choice(PLACES)}"
    if rng.random() < 0.35:
        s += f", {rng.choice(JOINERS)} {rng.choice(SUBJECTS)} {rng.choice(VERBS)} {rng.choice(OBJECTS)}"
    return s[0].upper() + s[1:] + "."


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/fixture.txt")
    ap.add_argument("--chars", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    parts, size = [], 0
    while size < args.chars:
        para = " ".join(sentence(rng) for _ in range(rng.randint(3, 7))) + "\n\n"
        parts.append(para)
        size += len(para)
    with open(args.out, "w", encoding="ascii") as f:
        f.write("".join(parts))


if __name__ == "__main__":
    main()
