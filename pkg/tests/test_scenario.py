import pytest

from htapsim.scenario import (
    ScenarioError,
    parse_cpuset,
    parse_predicate,
    parse_scenario,
    parse_sql,
)


class TestSqlGrammar:
    def test_update_with_conjunction(self):
        step = parse_sql("update t1 set c2=5 where c1=3 and c2=7", 1, "A")
        assert step.kind == "update"
        assert step.table == "t1"
        assert step.set_c2 == 5
        assert step.pred.eqs == {"c1": 3, "c2": 7}

    def test_update_without_where_matches_all(self):
        step = parse_sql("update t set c2=0", 1, "A")
        assert step.pred.eqs == {}

    def test_update_of_distribution_key_rejected(self):
        with pytest.raises(ScenarioError) as err:
            parse_sql("update t set c1=5 where c2=1", 1, "A", line=12)
        assert "line 12" in str(err.value)
        assert "distribution key" in str(err.value)

    def test_insert_multi_values(self):
        step = parse_sql("insert t values (1, 2), (3, 4)", 1, "A")
        assert step.rows == [(1, 2), (3, 4)]

    def test_select_and_lock(self):
        assert parse_sql("select t where c2=7", 1, "A").pred.eqs == {"c2": 7}
        assert parse_sql("lock t2", 1, "A").table == "t2"

    def test_garbage_raises_with_line(self):
        with pytest.raises(ScenarioError) as err:
            parse_sql("drop table students", 1, "A", line=33)
        assert "line 33" in str(err.value)

    def test_bad_condition_column(self):
        with pytest.raises(ScenarioError):
            parse_predicate("c3=1", 5)


class TestCpuset:
    def test_range(self):
        assert parse_cpuset("0-3") == frozenset({0, 1, 2, 3})

    def test_mixed(self):
        assert parse_cpuset("0-2,8,10-11") == frozenset({0, 1, 2, 8, 10, 11})


class TestScenarioDocument:
    def test_full_document(self):
        scenario = parse_scenario(
            """
tables:
  - {name: t1, rows: [[1, 2]]}
groups:
  - {name: olap_group, CONCURRENCY: 10, MEMORY_LIMIT: 35, MEMORY_SHARED_QUOTA: 20, CPU_RATE_LIMIT: 20}
  - {name: pinned_group, CONCURRENCY: 50, MEMORY_LIMIT: 15, CPUSET: 0-3}
sessions:
  - id: A
    group: olap_group
    steps:
      - {seq: 1, sql: begin}
      - {seq: 2, sql: update t1 set c2=9 where c1=1, mem: 100, cpu: 3}
      - {seq: 3, sql: commit}
expect:
  verdict: clean
  outcomes: {A: committed}
"""
        )
        assert scenario.tables[0].rows == [(1, 2)]
        assert scenario.groups[0].cpu_rate_limit == 20
        assert scenario.groups[1].cpuset == frozenset({0, 1, 2, 3})
        assert scenario.steps[1].mem == 100.0
        assert scenario.steps[1].cpu == 3
        assert scenario.expect.outcomes == {"A": "committed"}

    def test_yaml_error_carries_line_number(self):
        with pytest.raises(ScenarioError) as err:
            parse_scenario("sessions:\n  - id: A\n   bad indent: [")
        assert "line 3" in str(err.value)

    def test_duplicate_seq_rejected(self):
        with pytest.raises(ScenarioError) as err:
            parse_scenario(
                """
sessions:
  - id: A
    steps:
      - {seq: 1, sql: begin}
      - {seq: 1, sql: commit}
"""
            )
        assert "duplicate seq 1" in str(err.value)

    def test_duplicate_session_id_rejected(self):
        with pytest.raises(ScenarioError) as err:
            parse_scenario(
                """
sessions:
  - id: A
    steps: [{seq: 1, sql: begin}]
  - id: A
    steps: [{seq: 2, sql: begin}]
"""
            )
        assert "duplicate session id" in str(err.value)

    def test_unknown_group_parameter_rejected(self):
        with pytest.raises(ScenarioError) as err:
            parse_scenario(
                """
groups:
  - {name: g, CONCURRENCY: 1, MEMORY_LIMIT: 10, CPU_RATE: 20}
"""
            )
        assert "CPU_RATE" in str(err.value)

    def test_bad_verdict_rejected(self):
        with pytest.raises(ScenarioError):
            parse_scenario("expect: {verdict: maybe}")

    def test_step_missing_fields(self):
        with pytest.raises(ScenarioError) as err:
            parse_scenario(
                """
sessions:
  - id: A
    steps:
      - {sql: begin}
"""
            )
        assert "seq and sql" in str(err.value)
