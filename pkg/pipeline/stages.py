from problem_bank.bank import RecordFormat, ingest, split_from_dict
from trajectory_search.store import TraceStore


def load_curated_problems(run_dir):
    """Decontaminated problems when that stage ran, the curated ones otherwise."""
    clean = run_dir.path('problems_clean.jsonl')
    path = clean if clean.exists() else run_dir.path('problems.jsonl')
    return ingest(path, RecordFormat.VERIFIABLE_JSON).records


def load_split(run_dir):
    return split_from_dict(run_dir.read_json('split.json'))


def load_success_set(run_dir):
    """(problem, trace) pairs for every search problem whose trace succeeded, in bank order."""
    chosen = set(load_split(run_dir).search_set)
    problems = [problem for problem in load_curated_problems(run_dir) if problem.id in chosen]
    traces = {trace.problem_id: trace for trace in TraceStore(run_dir.traces_dir).load_many(p.id for p in problems)}
    return [
        (problem, traces[problem.id])
        for problem in problems
        if problem.id in traces and traces[problem.id].succeeded
    ]
