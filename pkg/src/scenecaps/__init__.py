"""Neural-symbolic scene understanding and mental simulation engine.

Detects 2D toy scenes as parse-trees of capsules, stores them in an
episodic memory with object tracking, grows the capsule network through an
oracle-driven meta-learning loop, learns intuitive physics with interaction
networks, and answers Replay / Predict / Fabricate queries over the whole
store via a CLI and an HTTP service.
"""

__version__ = "0.1.0"
