"""Perception study: question sets, durable response store, aggregates, API."""

from .core import (
    QqQuestion,
    QsQuestion,
    StudyAggregate,
    StudyDefinition,
    StudyQuestionSet,
    StudyStore,
    aggregate_study,
    create_study,
    expected_next,
    record_response,
)

__all__ = [
    "QqQuestion",
    "QsQuestion",
    "StudyAggregate",
    "StudyDefinition",
    "StudyQuestionSet",
    "StudyStore",
    "aggregate_study",
    "create_study",
    "expected_next",
    "record_response",
]
