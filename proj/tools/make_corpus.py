#!/usr/bin/env python3
"""Generate the bundled training corpus: ~1 MB of synthetic English-like text.

The text is meaningless but statistically textured (Zipf-weighted vocabulary,
sentence and paragraph structure, punctuation), which gives a byte-level
model something learnable. Output is fully determined by the seed, so the
committed corpus can be regenerated bit-for-bit:

    python3 tools/make_corpus.py > data/corpus.txt
"""

import random
import sys

SEED = 20260817
TARGET_BYTES = 1 << 20

NOUNS = """time year people way day man thing woman life child world school state family
student group country problem hand part place case week company system program question
work government number night point home water room mother area money story fact month lot
right study book eye job word business issue side kind head house service friend father
power hour game line end member law car city community name president team minute idea
kid body information back parent face others level office door health person art war
history party result change morning reason research girl guy moment air teacher force
education foot boy age policy process music market sense nation plan college interest
death experience effect use class control care field development role effort rate heart
drug show leader light voice wife whole police mind price report decision son view
relationship town road arm difference value building action model season society tax
director position player record paper space ground form event official matter center
couple site project activity star table need court oil situation cost industry figure
street tree""".split()

VERBS = """be have do say get make go know take see come think look want give use find
tell ask work seem feel try leave call keep provide hold turn follow begin show hear play
run move like live believe bring happen write sit stand lose pay meet include continue set
learn change lead understand watch let stop create speak read allow add spend grow open
walk win teach offer remember consider appear buy serve die send build stay fall cut reach
kill raise pass sell decide return explain hope develop carry break receive agree support
hit produce eat cover catch draw choose wait""".split()

ADJS = """good new first last long great little own other old right big high different
small large next early young important few public bad same able local sure free low late
hard major better economic strong possible whole real American national social only
political current clear white full special easy general personal open red difficult
available likely short single medical dark various entire close legal final main green
nice huge popular traditional cultural""".split()

ADVS = """up so out just now how then more also here well only very even back there down
still in as too when never really most on why about over again where right off always
today far away once soon often together later quickly simply certainly clearly recently
finally""".split()

PREPS = "of in to for with on at from by about as into like through after over".split()
DETS = "the a the the a this that some any each the the no every the".split()
CONJS = "and but or so because while although since if when".split()


def zipf_pick(rng, words):
    # Rank-weighted choice: P(rank r) proportional to 1/(r+2).
    n = len(words)
    weights = [1.0 / (i + 2) for i in range(n)]
    return rng.choices(words, weights=weights, k=1)[0]


def noun_phrase(rng):
    out = [zipf_pick(rng, DETS)]
    if rng.random() < 0.45:
        out.append(zipf_pick(rng, ADJS))
    out.append(zipf_pick(rng, NOUNS))
    if rng.random() < 0.2:
        out += [zipf_pick(rng, PREPS), zipf_pick(rng, DETS), zipf_pick(rng, NOUNS)]
    return out


def clause(rng):
    out = noun_phrase(rng)
    out.append(zipf_pick(rng, VERBS))
    if rng.random() < 0.35:
        out.append(zipf_pick(rng, ADVS))
    if rng.random() < 0.75:
        out += noun_phrase(rng)
    return out


def sentence(rng):
    words = clause(rng)
    while rng.random() < 0.3:
        words.append(zipf_pick(rng, CONJS))
        words += clause(rng)
    text = " ".join(words)
    text = text[0].upper() + text[1:]
    return text + rng.choices([".", ".", ".", "?", "!"], k=1)[0]


def main():
    rng = random.Random(SEED)
    chunks = []
    size = 0
    while size < TARGET_BYTES:
        n_sent = rng.randint(3, 7)
        para = " ".join(sentence(rng) for _ in range(n_sent)) + "\n\n"
        chunks.append(para)
        size += len(para.encode("utf-8"))
    text = "".join(chunks)
    sys.stdout.write(text)


if __name__ == "__main__":
    main()
