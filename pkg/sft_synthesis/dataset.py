import logging
import random
from collections import Counter

from problem_bank.bank import read_records, write_jsonl

from .models import DatasetStats, Provenance, SftRecord
from .serializers import GeneralRecordSerializer, SftRecordSerializer
from .tokens import get_token_counter


logger = logging.getLogger(__name__)


class DatasetError(Exception):
    pass


def mcq_to_record(mcq):
    """Keep an unconverted MCQ in question-to-answer form."""
    return SftRecord(
        problem_id=mcq.id,
        question=f'{mcq.question.strip()}\n{mcq.render_options()}',
        complex_cot='',
        response=mcq.answer_text(),
        provenance=Provenance.UNCONVERTED_MCQ,
    )


def _sample(source, items, count, rng):
    if count > len(items):
        raise DatasetError(f'Source "{source}" has {len(items)} records, recipe asks for {count}')
    return rng.sample(items, count)


def assemble_dataset(searched, unconverted_mcqs, general, recipe, seed, *, converted_ids=()):
    """
    Mix the three sources by recipe.

    MCQs whose id is in converted_ids became verifiable problems and are not
    eligible as unconverted records. Sampling and the final shuffle depend
    only on the inputs and seed.
    """
    recipe.clean()
    rng = random.Random(seed)
    converted = set(converted_ids)
    pool = [mcq for mcq in unconverted_mcqs if mcq.id not in converted]

    chosen = (
        _sample(Provenance.SEARCHED, list(searched), recipe.searched, rng)
        + [mcq_to_record(mcq) for mcq in _sample(Provenance.UNCONVERTED_MCQ, pool, recipe.unconverted, rng)]
        + _sample(Provenance.GENERAL_DOMAIN, list(general), recipe.general, rng)
    )

    duplicates = sorted(pid for pid, count in Counter(record.problem_id for record in chosen).items() if count > 1)
    if duplicates:
        raise DatasetError(f'problem ids appear in more than one source: {", ".join(duplicates[:10])}')
    for record in chosen:
        record.clean()

    rng.shuffle(chosen)
    logger.info('Assembled %d records with recipe %s', len(chosen), recipe.as_dict())
    return chosen


def compute_stats(records, token_counter=None):
    counter_path, count = get_token_counter(token_counter)
    with_cot = [record for record in records if record.complex_cot]
    cot_tokens = [count(record.complex_cot) for record in with_cot]
    response_tokens = [count(record.response) for record in records]

    stats = DatasetStats(
        record_count=len(records),
        mean_cot_tokens=sum(cot_tokens) / len(cot_tokens) if cot_tokens else 0.0,
        mean_response_tokens=sum(response_tokens) / len(records) if records else 0.0,
        mean_total_tokens=(sum(cot_tokens) + sum(response_tokens)) / len(records) if records else 0.0,
        provenance_counts={value: 0 for value in Provenance.values},
        token_counter=counter_path,
    )
    for record in records:
        stats.provenance_counts[str(record.provenance)] += 1
    stats.clean()
    return stats


def emit(records, path, token_counter=None):
    write_jsonl(path, (dict(SftRecordSerializer(record).data) for record in records))
    return compute_stats(records, token_counter)


def load_sft_records(path):
    return read_records(path, SftRecordSerializer)


def load_general_records(path):
    return read_records(path, GeneralRecordSerializer)
