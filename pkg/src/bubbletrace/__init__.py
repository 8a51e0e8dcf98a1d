"""Filter-bubble auditing for sequential recommenders: communities, diversity, influence and mitigation."""

__version__ = "0.1.0"
