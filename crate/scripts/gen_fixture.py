#!/usr/bin/env python3
"""Regenerates the synthetic ValueEval-format corpus under crates/core/assets/fixture."""
import random
from pathlib import Path

CATEGORIES = [
    ("Self-direction: thought", "people should be free to form their own opinions"),
    ("Self-direction: action", "everyone should choose their own path in life"),
    ("Stimulation", "life needs excitement and new adventures"),
    ("Hedonism", "people deserve pleasure and enjoyment"),
    ("Achievement", "hard work brings success and ambition is rewarded"),
    ("Power: dominance", "leaders need authority and control over others"),
    ("Power: resources", "wealth and money secure a good position"),
    ("Face", "a good reputation and public image matter"),
    ("Security: personal", "families need safety and good health"),
    ("Security: societal", "the nation must stay stable and orderly"),
    ("Tradition", "we should respect our customs and religion"),
    ("Conformity: rules", "laws and rules must be obeyed"),
    ("Conformity: interpersonal", "we should avoid hurting or upsetting others"),
    ("Humility", "we should stay modest and humble"),
    ("Benevolence: caring", "we must care for the welfare of our friends"),
    ("Benevolence: dependability", "people must be loyal and reliable"),
    ("Universalism: concern", "justice and equality belong to all people"),
    ("Universalism: nature", "we must protect nature and the environment"),
    ("Universalism: tolerance", "we should accept people who are different"),
    ("Universalism: objectivity", "decisions need evidence and rational thinking"),
]

TOPICS = [
    "We should ban fast food", "We should legalize cannabis", "We should abolish the death penalty",
    "We should subsidize public transport", "We should ban whaling", "We should end zoos",
    "We should adopt a four day week", "We should fight urbanization", "We should ban gambling",
    "We should introduce school uniforms", "We should raise the retirement age",
    "We should limit social media", "We should fund space exploration",
]


def main() -> None:
    rng = random.Random(20231015)
    out = Path(__file__).resolve().parent.parent / "crates" / "core" / "assets" / "fixture"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    labels = []
    rows.append(("A01002", "We should ban fast food", "in favor of",
                 "Fast food should be banned because it is really bad ..."))
    labels.append({"Security: personal", "Universalism: objectivity"})
    n = 200
    for i in range(1, n):
        if i < 21:
            chosen = {CATEGORIES[i - 1][0]}
            if i % 3 == 0:
                chosen.add(CATEGORIES[(i * 7) % 20][0])
        elif i % 17 == 0:
            chosen = set()
        else:
            chosen = set(c for c, _ in rng.sample(CATEGORIES, rng.choice([1, 1, 2, 3])))
        phrases = [p for c, p in CATEGORIES if c in chosen]
        premise = ("because " + " and ".join(phrases)) if phrases else "because it is simply the case"
        topic = rng.choice(TOPICS)
        stance = rng.choice(["in favor of", "against"])
        rows.append((f"A{10000 + i * 7:05d}", topic, stance, premise[0].upper() + premise[1:] + "."))
        labels.append(chosen)
    with open(out / "arguments.tsv", "w", encoding="utf-8") as f:
        f.write("Argument ID\tConclusion\tStance\tPremise\n")
        for r in rows:
            f.write("\t".join(r) + "\n")
    with open(out / "labels.tsv", "w", encoding="utf-8") as f:
        f.write("Argument ID\t" + "\t".join(c for c, _ in CATEGORIES) + "\n")
        for r, ls in zip(rows, labels):
            f.write(r[0] + "\t" + "\t".join("1" if c in ls else "0" for c, _ in CATEGORIES) + "\n")


if __name__ == "__main__":
    main()
