#!/usr/bin/env python3
"""Generate the synthetic desk corpus used by the tests and the default pipeline.

Sentences come from a small random grammar over a few hundred words, so two
sentences built around the same content words usually differ elsewhere.

Usage: gen_desk_corpus.py OUT_DIR [--sentences 6000] [--per-doc 50] [--seed 7]
"""
import argparse
import pathlib
import random

NAMES = {
    "Anna": "her", "Maria": "her", "Lucy": "her", "Clara": "her", "Nora": "her", "Emma": "her",
    "Rosa": "her", "Julia": "her", "Kate": "her", "Mia": "her", "Ella": "her", "Grace": "her",
    "Tom": "his", "Jack": "his", "Peter": "his", "Sam": "his", "Ben": "his", "Leo": "his",
    "Max": "his", "Oscar": "his", "Henry": "his", "Paul": "his", "Adam": "his", "Rob": "his",
}
PEOPLE = ["mother", "father", "sister", "brother", "friend", "teacher", "neighbor", "uncle",
          "aunt", "cousin", "boss", "coach", "doctor", "grandmother", "grandfather", "roommate"]
ADJ = ["old", "small", "quiet", "bright", "dark", "warm", "cold", "heavy", "little", "empty",
       "wooden", "broken", "strange", "green", "tall", "narrow", "busy", "soft", "red", "blue",
       "new", "dusty", "shiny", "tiny", "huge", "wet", "dry", "clean", "dirty", "cheap",
       "expensive", "funny", "lovely", "peculiar", "plain", "rusty", "sharp", "smooth", "sweet",
       "yellow", "favorite", "round", "square", "white", "black", "golden", "fragile", "noisy"]
THING = ["door", "window", "letter", "box", "lamp", "chair", "table", "basket", "map", "key",
         "book", "coat", "bottle", "picture", "blanket", "cup", "bag", "ring", "phone", "bike",
         "ball", "kite", "guitar", "camera", "cake", "pie", "hat", "scarf", "watch", "wallet",
         "ticket", "umbrella", "clock", "mirror", "pillow", "plant", "radio", "shoe", "sandwich",
         "notebook", "pencil", "bucket", "rope", "candle", "puzzle", "toy", "jacket", "painting"]
ANIMAL = ["dog", "cat", "bird", "horse", "rabbit", "puppy", "kitten", "duck", "fox", "cow"]
PLACE = ["house", "garden", "kitchen", "forest", "river", "market", "station", "village",
         "library", "bridge", "field", "harbor", "school", "church", "hill", "road", "beach",
         "park", "store", "office", "bakery", "lake", "farm", "city", "museum", "hospital",
         "restaurant", "street", "yard", "barn", "attic", "basement", "mall", "zoo", "gym"]
PREP = ["near", "behind", "inside", "beside", "across", "under", "along", "outside", "by",
        "past", "around", "through", "toward", "into", "at"]
VT = ["opened", "carried", "found", "watched", "cleaned", "painted", "dropped", "moved",
      "fixed", "hid", "lifted", "pushed", "touched", "wrapped", "held", "lost", "bought",
      "sold", "borrowed", "broke", "cooked", "baked", "washed", "chased", "fed", "grabbed",
      "noticed", "picked up", "put down", "threw", "caught", "kept", "shared", "stole",
      "tried", "built", "checked", "counted", "folded", "packed", "shook", "tasted"]
VI = ["laughed", "cried", "smiled", "waited", "slept", "danced", "sang", "shouted", "sighed",
      "stayed", "left", "arrived", "rested", "worked", "studied", "practiced", "paused",
      "listened", "wondered", "hesitated", "relaxed", "whispered", "shivered", "yawned"]
MOTION = ["walked", "ran", "drove", "hurried", "wandered", "climbed", "rode", "returned",
          "went", "came", "swam", "raced", "moved", "rushed", "headed", "jogged", "biked"]
FEEL = ["tired", "happy", "afraid", "angry", "calm", "lonely", "curious", "nervous", "proud",
        "sad", "excited", "bored", "hungry", "worried", "relieved", "surprised", "sleepy",
        "grateful", "embarrassed", "confused"]
SAY = ["said", "told everyone", "explained", "promised", "decided", "realized", "noticed",
       "remembered", "thought", "hoped", "knew", "heard", "admitted", "guessed"]
WANT = ["wanted to", "tried to", "decided to", "forgot to", "needed to", "hoped to",
        "refused to", "planned to", "agreed to", "learned to", "offered to", "promised to"]
VBASE = ["open", "carry", "find", "watch", "clean", "paint", "move", "fix", "hide", "lift",
         "buy", "sell", "borrow", "cook", "bake", "wash", "feed", "catch", "keep", "share",
         "build", "check", "fold", "pack", "visit", "leave", "rob", "visit", "call", "see"]
OPENER = ["One day", "That morning", "Later that night", "After dinner", "Before dawn",
          "On Monday", "On Saturday", "Last summer", "The next day", "After school",
          "In the evening", "At noon", "Suddenly", "Eventually", "A week later", "Years ago",
          "Once", "Soon", "Luckily", "Sadly", "Finally", "At first", "Yesterday", "Meanwhile"]
TAIL = ["that night", "after dinner", "in the evening", "all afternoon", "the next day",
        "for a long time", "once again", "without a word", "right away", "very slowly",
        "as fast as possible", "with great care", "for the first time", "before lunch",
        "every morning", "in the rain", "at last", "more than once", "all by herself",
        "all by himself", "together", "again"]
SUB = ["because", "before", "after", "while", "until", "when", "although", "since"]
CONJ = ["and", "but", "so"]
NUM = ["two", "three", "four", "five", "several", "many", "a few", "more"]


def a_or_an(word):
    return "an" if word[0] in "aeiou" else "a"


class Grammar:
    def __init__(self, rng):
        self.r = rng

    def pick(self, xs):
        return self.r.choice(xs)

    def person(self):
        """Returns (text, possessive, is_name)."""
        if self.r.random() < 0.65:
            name = self.pick(list(NAMES))
            return name, NAMES[name], True
        owner = self.pick(["My", "Her", "His", "Our", "Their", "The"])
        return f"{owner} {self.pick(PEOPLE)}", "their", False

    def obj(self, poss=None):
        r = self.r.random()
        noun = self.pick(THING if self.r.random() < 0.8 else ANIMAL)
        if r < 0.35:
            return f"the {self.pick(ADJ)} {noun}"
        if r < 0.55:
            return f"the {noun}"
        if r < 0.75 and poss:
            return f"{poss} {noun}"
        if r < 0.9:
            adj = self.pick(ADJ)
            return f"{a_or_an(adj)} {adj} {noun}"
        return f"{self.pick(NUM)} {noun}s"

    def place(self):
        place = self.pick(PLACE)
        if self.r.random() < 0.3:
            return f"{self.pick(PREP)} the {self.pick(ADJ)} {place}"
        return f"{self.pick(PREP)} the {place}"

    def vp(self, poss):
        r = self.r.random()
        if r < 0.30:
            s = f"{self.pick(VT)} {self.obj(poss)}"
            if self.r.random() < 0.5:
                s += f" {self.place()}"
            return s
        if r < 0.45:
            s = f"{self.pick(MOTION)} {self.place()}"
            if self.r.random() < 0.4:
                s += f" to {self.pick(VBASE)} {self.obj(poss)}"
            return s
        if r < 0.57:
            return f"{self.pick(VI)} {self.pick(TAIL) if self.r.random() < 0.5 else self.place()}"
        if r < 0.69:
            return f"{self.pick(WANT)} {self.pick(VBASE)} {self.obj(poss)}"
        if r < 0.79:
            verb = self.pick(["felt", "was", "seemed", "became", "got"])
            return f"{verb} {self.pick(FEEL)}"
        if r < 0.88:
            return f"{self.pick(SAY)} that {self.clause(depth=1)}"
        if r < 0.94:
            return f"closed {poss} eyes and let {poss} body relax"
        return f"had never seen {self.obj(poss)} {self.place()}"

    def clause(self, depth=0):
        subj, poss, _ = self.person()
        if depth and self.r.random() < 0.4:
            subj, poss = self.pick(["she", "he", "they", "it", "nobody"]), "their"
        s = f"{subj} {self.vp(poss)}"
        return s[0].lower() + s[1:] if depth and not s.split()[0] in NAMES else s

    def sentence(self):
        s = self.clause()
        r = self.r.random()
        if r < 0.2:
            s += f", {self.pick(CONJ)} {self.clause(depth=1)}"
        elif r < 0.4:
            s += f" {self.pick(SUB)} {self.clause(depth=1)}"
        elif r < 0.55:
            s += f" {self.pick(TAIL)}"
        if self.r.random() < 0.3:
            first = s.split()[0]
            if first not in NAMES:
                s = s[0].lower() + s[1:]
            s = f"{self.pick(OPENER)}, {s}"
        s = s[0].upper() + s[1:]
        end = "." if self.r.random() < 0.92 else self.pick(["!", "?"]) if s.split()[0] in ("Did", "Why") else "!"
        return s + end


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir")
    ap.add_argument("--sentences", type=int, default=2000)
    ap.add_argument("--per-doc", type=int, default=50)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    g = Grammar(rng)
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for old in out.glob("story*.txt"):
        old.unlink()
    made, doc = 0, 0
    while made < args.sentences:
        n = min(args.per_doc, args.sentences - made)
        lines = []
        while len(lines) < n:
            s = g.sentence()
            if 10 <= len(s.split()) <= 30:
                lines.append(s)
        (out / f"story{doc:03}.txt").write_text(" ".join(lines) + "\n")
        made += n
        doc += 1


if __name__ == "__main__":
    main()
