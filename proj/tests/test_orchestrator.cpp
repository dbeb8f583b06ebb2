#include "care/error.hpp"
#include "care/orchestrator.hpp"
#include "care/scenario.hpp"
#include "care/session_store.hpp"

#include "scenarios.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace care;
using nlohmann::json;

namespace {

QuestionGroup make_group(std::string topic, std::uint32_t first, std::size_t n) {
    QuestionGroup g{std::move(topic), {}};
    for (std::size_t i = 0; i < n; ++i) g.questions.push_back({NeedId{first + static_cast<std::uint32_t>(i)}, "q?"});
    return g;
}

std::string write_call_body(const std::vector<Fixture>& script) {
    for (const auto& f : script) {
        if (f.key.role == "solution_craft" && f.response.is_tool_call() &&
            f.response.tool_calls[0].name == "write_solution") {
            return f.response.tool_calls[0].args["solution"].get<std::string>();
        }
    }
    return {};
}

Fixture write_fixture(std::uint32_t turn, const std::string& body) {
    return test::tool_fixture("hawaii", "solution_craft", turn, {test::call("write_solution", {{"solution", body}})});
}

}  // namespace

TEST(Phases, NamesRoundTrip) {
    for (auto k : {PhaseKind::AwaitUserQuery, PhaseKind::MilestoneDecision, PhaseKind::NeedsDiscovery,
                   PhaseKind::Ranking, PhaseKind::Inquiring, PhaseKind::SolutionDrafting, PhaseKind::SolutionReady}) {
        EXPECT_EQ(phase_kind_from_string(to_string(k)), k);
    }
    Phase p{PhaseKind::Inquiring, 1, 2};
    EXPECT_EQ(phase_from_json(json::parse(phase_to_json(p).dump())), p);
    EXPECT_TRUE(p.awaits_user());
    EXPECT_FALSE(Phase{PhaseKind::Ranking}.awaits_user());
}

TEST(Phases, TransitionTable) {
    using P = PhaseKind;
    EXPECT_TRUE(is_valid_transition(P::AwaitUserQuery, P::MilestoneDecision));
    EXPECT_TRUE(is_valid_transition(P::MilestoneDecision, P::NeedsDiscovery));
    EXPECT_TRUE(is_valid_transition(P::MilestoneDecision, P::SolutionDrafting));
    EXPECT_TRUE(is_valid_transition(P::NeedsDiscovery, P::Ranking));
    EXPECT_TRUE(is_valid_transition(P::Ranking, P::Inquiring));
    EXPECT_TRUE(is_valid_transition(P::Inquiring, P::Inquiring));
    EXPECT_TRUE(is_valid_transition(P::Inquiring, P::MilestoneDecision));
    EXPECT_TRUE(is_valid_transition(P::SolutionDrafting, P::SolutionReady));
    EXPECT_TRUE(is_valid_transition(P::SolutionReady, P::MilestoneDecision));
    EXPECT_FALSE(is_valid_transition(P::NeedsDiscovery, P::Inquiring));
    EXPECT_FALSE(is_valid_transition(P::Ranking, P::SolutionDrafting));
    EXPECT_FALSE(is_valid_transition(P::MilestoneDecision, P::MilestoneDecision));
    EXPECT_FALSE(is_valid_transition(P::SolutionReady, P::SolutionDrafting));
}

TEST(Milestones, ParsesBlock) {
    auto m = parse_milestone_block(
        "**Next milestone:** Collect detailed needs.\n- Explanation: we know little.\n  More detail here.\n"
        "User query/feedback: Plan a trip");
    EXPECT_EQ(m.text, "Collect detailed needs.");
    EXPECT_NE(m.explanation.find("we know little."), std::string::npos);
    EXPECT_NE(m.explanation.find("More detail here."), std::string::npos);
    EXPECT_EQ(m.feedback, "Plan a trip");
    EXPECT_EQ(parse_milestone_block("just some words").text, "just some words");
    EXPECT_EQ(parse_milestone_block("next MILESTONE: lower").text, "lower");
}

TEST(Batches, KnownSplits) {
    auto batches = plan_batches({make_group("A", 1, 5), make_group("B", 10, 7), make_group("C", 20, 4),
                                 make_group("D", 30, 0), make_group("E", 40, 1)});
    std::vector<std::size_t> sizes;
    for (const auto& b : batches) sizes.push_back(b.questions.size());
    EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 2, 4, 3, 4, 1}));
    EXPECT_EQ(batches[1].batch_index, 1u);
    EXPECT_EQ(batches.back().group_index, 4u);
}

TEST(Batches, RandomGroupsMatchOracle) {
    std::mt19937 rng(17);
    for (int n = 0; n < 2000; ++n) {
        std::vector<QuestionGroup> groups;
        std::uint32_t next = 0;
        int count = static_cast<int>(rng() % 5);
        for (int g = 0; g < count; ++g) {
            auto size = rng() % 14;
            groups.push_back(make_group("G" + std::to_string(g), next, size));
            next += static_cast<std::uint32_t>(size);
        }
        auto batches = plan_batches(groups);
        std::size_t cursor = 0;
        for (std::size_t g = 0; g < groups.size(); ++g) {
            const auto& qs = groups[g].questions;
            if (qs.empty()) continue;
            const std::size_t k = (qs.size() + 3) / 4;
            std::vector<RankedQuestion> joined;
            std::size_t lo = SIZE_MAX, hi = 0;
            for (std::size_t b = 0; b < k; ++b, ++cursor) {
                ASSERT_LT(cursor, batches.size());
                const auto& batch = batches[cursor];
                EXPECT_EQ(batch.group_index, g);
                EXPECT_EQ(batch.batch_index, b);
                EXPECT_EQ(batch.topic, groups[g].topic);
                EXPECT_LE(batch.questions.size(), kMaxBatchQuestions);
                lo = std::min(lo, batch.questions.size());
                hi = std::max(hi, batch.questions.size());
                joined.insert(joined.end(), batch.questions.begin(), batch.questions.end());
            }
            EXPECT_LE(hi - lo, 1u);
            EXPECT_EQ(joined, qs);
        }
        EXPECT_EQ(cursor, batches.size());
    }
}

TEST(Batches, JsonRoundTrip) {
    QuestionBatch b{2, 1, "Travel", {{NeedId{4}, "When?"}}};
    EXPECT_EQ(batch_from_json(json::parse(batch_to_json(b).dump())), b);
}

TEST(Batches, CountsEnumeratedLines) {
    EXPECT_EQ(count_enumerated_questions("Intro\n1. A?\n2) B?\n  3. C?\n2024. year\n4.5 no\n5.\nx 6. no"), 4u);
    EXPECT_EQ(count_enumerated_questions("no list"), 0u);
}

TEST(Events, JsonRoundTrip) {
    QuestionBatch batch{0, 0, "Travel", {{NeedId{2}, "Who?"}, {NeedId{3}, "When?"}}};
    std::vector<UiEvent> events = {UiEvent::agent_message("hi"),
                                   UiEvent::questions_posted(batch),
                                   UiEvent::needs_updated(4),
                                   UiEvent::solution_updated(9),
                                   UiEvent::phase_changed({PhaseKind::Inquiring, 1, 0}),
                                   UiEvent::solution_ready_notice(),
                                   UiEvent::grounding_failure({NeedId{7}}),
                                   UiEvent::error_raised(Error(ErrorCode::BackendError, "down"))};
    for (const auto& e : events) EXPECT_EQ(ui_event_from_json(json::parse(ui_event_to_json(e).dump())), e);
    EXPECT_EQ(ui_event_to_json(events[1]).dump(),
              R"({"type":"QuestionsPosted","topic":"Travel","questions":[{"need_id":"002","question":"Who?"},{"need_id":"003","question":"When?"}]})");
}

TEST(Scenarios, AllShippedFixturesReplayStrictly) {
    auto names = test::scenario_names();
    ASSERT_GE(names.size(), 7u);
    for (const auto& name : names) {
        auto result = test::run_fixture(name);
        auto diffs = compare_expectations(test::fixture_scenario(name), result);
        EXPECT_TRUE(diffs.empty()) << name << ": " << (diffs.empty() ? "" : diffs.front());
    }
}

TEST(Scenarios, PhaseChangesFollowTheTransitionTable) {
    for (const auto& name : test::scenario_names()) {
        auto result = test::run_fixture(name);
        PhaseKind prev = PhaseKind::AwaitUserQuery;
        for (const auto& step : result.step_events) {
            for (auto k : test::phase_trace(step)) {
                EXPECT_TRUE(is_valid_transition(prev, k) || (prev == k && k == PhaseKind::Inquiring))
                    << name << ": " << to_string(prev) << " -> " << to_string(k);
                prev = k;
            }
        }
    }
}

TEST(Scenarios, HawaiiWalkthrough) {
    auto result = test::run_fixture("hawaii");
    using P = PhaseKind;
    EXPECT_EQ(test::phase_trace(result.step_events[0]),
              (std::vector<P>{P::MilestoneDecision, P::NeedsDiscovery, P::Ranking, P::Inquiring}));
    EXPECT_EQ(result.drafting_runs, 1u);
    EXPECT_EQ(result.milestones, 1u);  // BeginPlan is not a milestone
    EXPECT_EQ(result.panels["phase"]["kind"], "SolutionReady");
    ASSERT_TRUE(result.panels["solution"].is_object());
    EXPECT_FALSE(result.panels["solution"]["need_refs"].empty());
    EXPECT_EQ(test::count_kind(result.step_events.back(), UiEventKind::SolutionReadyNotice), 1u);
}

TEST(Scenarios, WrongPhaseAndEmptyQuery) {
    ScriptedBackend backend;
    Session s("x", "x", test::prompts(), backend);
    EXPECT_THROW(s.handle_user_message("hello"), Error);
    EXPECT_THROW(s.apply_manual_edit(AddManual{"x"}), Error);
    try {
        s.start("   ", false);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptyQuery);
    }
}

TEST(Grounding, DanglingCitationTriggersRedraft) {
    auto script = test::fixture_script("hawaii");
    auto good = write_call_body(script);
    ASSERT_FALSE(good.empty());
    script = test::patch_script(script, {write_fixture(1, good + "\nAlso see (Need ID: 009)."), write_fixture(3, good),
                                         test::text_fixture("hawaii", "solution_craft", 4, "Fixed. [SolutionEnd]")});
    ScriptedBackend backend(script);
    auto result = run_scenario(test::fixture_scenario("hawaii"), test::prompts(), backend);
    const auto& last = result.step_events.back();
    EXPECT_EQ(test::count_kind(last, UiEventKind::SolutionUpdated), 2u);
    EXPECT_EQ(test::count_kind(last, UiEventKind::GroundingFailure), 0u);
    EXPECT_EQ(result.drafting_runs, 1u);
    EXPECT_EQ(result.panels["solution"]["body"], good);
}

TEST(Grounding, ExhaustedRedraftsReportFailure) {
    auto script = test::fixture_script("hawaii");
    auto bad = write_call_body(script) + "\n(Need ID: 077)";
    script = test::patch_script(script, {write_fixture(1, bad), write_fixture(3, bad),
                                         test::text_fixture("hawaii", "solution_craft", 4, "[SolutionEnd]"),
                                         write_fixture(5, bad),
                                         test::text_fixture("hawaii", "solution_craft", 6, "[SolutionEnd]")});
    ScriptedBackend backend(script);
    auto result = run_scenario(test::fixture_scenario("hawaii"), test::prompts(), backend);
    const auto& last = result.step_events.back();
    EXPECT_EQ(test::count_kind(last, UiEventKind::SolutionUpdated), 3u);
    ASSERT_EQ(test::count_kind(last, UiEventKind::GroundingFailure), 1u);
    for (const auto& e : last) {
        if (e.kind == UiEventKind::GroundingFailure) EXPECT_EQ(e.need_ids, std::vector<NeedId>{NeedId{77}});
    }
    EXPECT_EQ(result.panels["phase"]["kind"], "SolutionReady");
}

TEST(Replay, RecordsRebuildIdenticalState) {
    for (const auto& name : test::scenario_names()) {
        MemorySessionStore store;
        auto result = test::run_fixture(name, true, &store);
        auto scenario = test::fixture_scenario(name);
        ScriptedBackend unused;
        Session replayed(scenario.session_tag, scenario.session_tag, test::prompts(), unused);
        for (const auto& r : store.load_records(scenario.session_tag)) replayed.apply_record(r);
        EXPECT_EQ(replayed.snapshot_json().dump(), result.snapshot.dump()) << name;
        EXPECT_EQ(panel_to_json(make_panel_snapshot(replayed.state())).dump(), result.panels.dump()) << name;
        EXPECT_EQ(unused.call_count(), 0u);
    }
}

TEST(Replay, SnapshotPlusTailEqualsFullReplay) {
    MemorySessionStore store;
    auto result = test::run_fixture("hawaii_feedback", true, &store);
    const auto tag = test::fixture_scenario("hawaii_feedback").session_tag;
    auto records = store.load_records(tag);
    ASSERT_GT(records.size(), 10u);
    ScriptedBackend unused;
    for (std::size_t cut : {std::size_t{1}, records.size() / 3, records.size() / 2, records.size() - 1}) {
        Session head(tag, tag, test::prompts(), unused);
        for (std::size_t i = 0; i < cut; ++i) head.apply_record(records[i]);
        auto snap = json::parse(head.snapshot_json().dump());
        Session tail(tag, tag, test::prompts(), unused);
        tail.restore_snapshot(snap);
        for (std::size_t i = cut; i < records.size(); ++i) tail.apply_record(records[i]);
        EXPECT_EQ(tail.snapshot_json().dump(), result.snapshot.dump()) << "cut " << cut;
    }
}

TEST(Replay, EventSequenceGapIsRejected) {
    MemorySessionStore store;
    test::run_fixture("baseline", true, &store);
    auto records = store.load_records("baseline");
    ScriptedBackend unused;
    Session s("baseline", "baseline", test::prompts(), unused);
    bool skipped = false, threw = false;
    for (const auto& r : records) {
        if (!skipped && r.value("op", "") == "event") {
            skipped = true;
            continue;
        }
        try {
            s.apply_record(r);
        } catch (const Error&) {
            threw = true;
            break;
        }
    }
    EXPECT_TRUE(skipped);
    EXPECT_TRUE(threw);
}

TEST(Replay, ResumedSessionContinuesLive) {
    // Cut the log right after the session starts asking, rebuild, then answer.
    MemorySessionStore store;
    auto scenario = test::fixture_scenario("hawaii");
    ScriptedBackend backend(test::fixture_script("hawaii"), true);
    std::size_t records_after_start = 0;
    {
        Session live("hawaii", "hawaii", test::prompts(), backend);
        live.set_record_sink([&](const nlohmann::ordered_json& r) { store.append("hawaii", r); });
        live.start(scenario.query, false);
        records_after_start = live.state().record_count;
    }
    Session rebuilt("hawaii", "hawaii", test::prompts(), backend);
    for (const auto& r : store.load_records("hawaii")) rebuilt.apply_record(r);
    EXPECT_EQ(rebuilt.state().record_count, records_after_start);
    for (const auto& step : scenario.steps) rebuilt.handle_user_message(step.text, step.intent);
    auto full = test::run_fixture("hawaii");
    EXPECT_EQ(rebuilt.snapshot_json().dump(), full.snapshot.dump());
}
