"""Downstream emotion label space."""
from enum import IntEnum


class EmotionClass(IntEnum):
    HAPPY = 0
    ANGER = 1
    SADNESS = 2
    NEUTRAL = 3

    @classmethod
    def parse(cls, name: str) -> "EmotionClass":
        key = name.strip().upper()
        aliases = {"HAP": "HAPPY", "ANG": "ANGER", "SAD": "SADNESS", "NEU": "NEUTRAL"}
        return cls[aliases.get(key, key)]


N_CLASSES = len(EmotionClass)

# Class counts of the two four-class benchmarks; used as default synthetic proportions.
IEMOCAP_COUNTS = {
    EmotionClass.HAPPY: 1636,
    EmotionClass.ANGER: 1103,
    EmotionClass.SADNESS: 1084,
    EmotionClass.NEUTRAL: 1708,
}
MSP_IMPROV_COUNTS = {
    EmotionClass.HAPPY: 999,
    EmotionClass.ANGER: 460,
    EmotionClass.SADNESS: 627,
    EmotionClass.NEUTRAL: 1733,
}
