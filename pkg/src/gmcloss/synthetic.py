"""Deterministic synthetic caption corpora.

``zipf_corpus`` draws captions at several granularity levels: level 0 is a
terse head caption shared verbatim by many annotators, each further level
appends detail words drawn from a Zipfian vocabulary. Level probabilities
decay as a power law, so detailed captions are rare.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

SUBJECTS = (
    "dog cat man woman girl boy child chef player singer dancer horse bird car "
    "train crowd baby teacher driver fisherman"
).split()
VERBS = (
    "running jumping cooking singing dancing talking swimming driving playing "
    "walking eating riding"
).split()
PLACES = (
    "in a kitchen", "on a stage", "in the park", "on the beach", "in a pool",
    "on the road", "in a field", "at a table", "in the snow", "near a river",
)
_SYLLABLES = "ka lo me fu ri ta no si ve du pa mi zo re gu".split()


def _tail_vocab(size: int, rng: np.random.Generator) -> list[str]:
    words: dict[str, None] = {}
    while len(words) < size:
        words["".join(rng.choice(_SYLLABLES, size=int(rng.integers(2, 4))))] = None
    return list(words)


def zipf_corpus(n_videos: int = 50, captions_per_video: int = 20, levels: int = 6,
                level_exponent: float = 2.0, vocab_size: int = 400, word_exponent: float = 1.1,
                seed: int = 0) -> dict[str, list[str]]:
    """Map of video id to captions whose detail level follows a power law."""
    rng = np.random.default_rng(seed)
    vocab = _tail_vocab(vocab_size, rng)
    word_p = 1.0 / np.arange(1, vocab_size + 1) ** word_exponent
    word_p /= word_p.sum()
    level_p = 1.0 / np.arange(1, levels + 1) ** level_exponent
    level_p /= level_p.sum()

    out = {}
    for v in range(n_videos):
        subject = SUBJECTS[v % len(SUBJECTS)]
        verb = VERBS[int(rng.integers(len(VERBS)))]
        place = PLACES[int(rng.integers(len(PLACES)))]
        head = f"a {subject} is {verb}"
        caps = []
        for _ in range(captions_per_video):
            level = int(rng.choice(levels, p=level_p))
            if level == 0:
                caps.append(head)
                continue
            extra = rng.choice(vocab, size=2 * level - 1, p=word_p)
            caps.append(f"{head} {place} with " + " ".join(extra))
        out[f"video{v:04d}"] = caps
    return out


TOY = {
    "toy00": ["a man is slicing onions in a kitchen", "a chef chops onions",
              "someone cuts vegetables with a knife", "a man is cooking",
              "a cook slices onions on a wooden board"],
    "toy01": ["a dog runs on the beach", "a brown dog is running by the sea",
              "a dog plays in the sand", "a dog is running", "a puppy chases waves on the shore"],
    "toy02": ["a woman sings on a stage", "a singer performs a song", "a woman is singing",
              "a lady sings into a microphone under bright lights", "a performer sings to a crowd"],
    "toy03": ["a car drives down a highway", "a red car speeds along the road", "a car is driving",
              "a vehicle travels on a motorway at night", "a sports car races past trees"],
    "toy04": ["a boy plays basketball", "a kid shoots a ball into a hoop", "a boy is playing",
              "a teenager dribbles a basketball on an outdoor court", "a child plays basketball"],
    "toy05": ["a cat sleeps on a sofa", "a cat is sleeping", "a grey cat naps on a couch",
              "a kitten curls up on a cushion", "a cat rests on the furniture"],
    "toy06": ["people dance at a party", "a group of people are dancing", "friends dance to music",
              "couples dance under colorful disco lights", "a crowd dances at a wedding"],
    "toy07": ["a man swims in a pool", "a swimmer does laps", "a man is swimming",
              "an athlete swims freestyle across an indoor pool", "a person swims in clear water"],
    "toy08": ["a girl rides a horse", "a horse is running", "a young rider gallops across a field",
              "a girl on horseback jumps a fence", "a woman rides a white horse"],
    "toy09": ["a man plays guitar", "a musician strums an acoustic guitar", "a man is playing music",
              "a guitarist performs a folk song on a porch", "someone plays the guitar"],
    "toy10": ["a plane takes off", "an airplane lifts off the runway", "a plane is flying",
              "a jet climbs into a cloudy sky", "a passenger aircraft departs an airport"],
    "toy11": ["children play soccer", "kids kick a ball on a field", "a soccer game is played",
              "young players chase the ball across green grass", "boys play football in a park"],
}


def shipped_path(name: str):
    """Path of a fixture shipped with the package (``toy.jsonl``, ``zipf.jsonl``, ``toy_config.json``)."""
    return resources.files("gmcloss") / "data" / name
