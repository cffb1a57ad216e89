#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "solharness/refine.hpp"
#include "testutil.hpp"

using namespace solharness;
namespace fs = std::filesystem;
using testutil::contract_body;

namespace {

struct LoopFixture {
    testutil::TempDir tmp;
    BenchmarkTask task;
    RunPaths paths;
    LoopConfig cfg;

    LoopFixture() {
        testutil::make_repo(repo());
        task = testutil::make_task(repo());
        paths.work_root = tmp.path() / "work";
        paths.checkpoint_dir = tmp.path() / "ckpt";
    }
    fs::path repo() const { return tmp.path() / "repo"; }
    fs::path ckpt() const { return tmp.path() / "ckpt"; }
    fs::path workdir() const { return tmp.path() / "work" / task.task_id; }
};

// Failing forge runs whose failure text differs per round, so renderings stay
// dissimilar and the oscillation rule only fires when a test asks for it.
ForgeFeedback failing(int round, int passed, int total) {
    ForgeFeedback fb = testutil::forge_result(true, passed, total);
    for (int i = passed; i < total; ++i) {
        fb.failures.push_back({"GreeterTest::test_" + std::to_string(i) + "()",
                               testutil::noisy_reason(round * 10 + i), ""});
    }
    return fb;
}

FakeVerifier::RoundScript fail_round(int round, int passed, int total) {
    return {failing(round, passed, total), {}};
}

FakeVerifier::RoundScript perfect_round() {
    return {testutil::forge_result(true, 2, 2), {}};
}

struct PoisonBackend : Backend {
    CompletionResult complete(const std::vector<Message>&,
                              const std::vector<ToolSchema>&) override {
        throw std::logic_error("backend must not be called");
    }
};

struct PoisonVerifier : Verifier {
    ForgeFeedback run_forge(const fs::path&, const BenchmarkTask&, int) override {
        throw std::logic_error("verifier must not be called");
    }
    std::vector<SlitherFinding> run_slither(const fs::path&, const BenchmarkTask&,
                                            int) override {
        throw std::logic_error("verifier must not be called");
    }
};

FeedbackReport report_with_rate(int passed, int total, const std::string& text) {
    FeedbackReport r;
    r.forge = testutil::forge_result(true, passed, total);
    r.rendered_text = text;
    return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

TEST_CASE("loop config validation and JSON round-trip") {
    LoopConfig cfg;
    CHECK_NOTHROW(validate_loop_config(cfg));

    LoopConfig bad = cfg;
    bad.max_rounds = 0;
    CHECK_THROWS_AS(validate_loop_config(bad), ValidationError);
    bad = cfg;
    bad.stagnation_n = 0;
    CHECK_THROWS_AS(validate_loop_config(bad), ValidationError);
    bad = cfg;
    bad.similarity_tau = 0.0;
    CHECK_THROWS_AS(validate_loop_config(bad), ValidationError);
    bad = cfg;
    bad.similarity_tau = 1.5;
    CHECK_THROWS_AS(validate_loop_config(bad), ValidationError);
    bad = cfg;
    bad.token_budget = -1;
    CHECK_THROWS_AS(validate_loop_config(bad), ValidationError);
    bad = cfg;
    bad.tool_call_cap = 0;
    CHECK_THROWS_AS(validate_loop_config(bad), ValidationError);
    bad = cfg;
    bad.tool_failure_cap = 0;
    CHECK_THROWS_AS(validate_loop_config(bad), ValidationError);
    bad = cfg;
    bad.prune_keep_rounds = 0;
    CHECK_THROWS_AS(validate_loop_config(bad), ValidationError);

    cfg.token_budget = 123456;
    cfg.wall_clock_budget = std::chrono::milliseconds(7500);
    cfg.selection_policy = SelectionPolicy::min_vuln;
    const json j = cfg;
    CHECK(j.at("wall_clock_budget_ms") == 7500);
    const LoopConfig back = j.get<LoopConfig>();
    CHECK(back.token_budget == cfg.token_budget);
    CHECK(back.wall_clock_budget == cfg.wall_clock_budget);
    CHECK(back.selection_policy == SelectionPolicy::min_vuln);
    CHECK(back.coding_system_prompt == cfg.coding_system_prompt);

    const LoopConfig defaults = json::object().get<LoopConfig>();
    CHECK(defaults.max_rounds == 50);
    CHECK_FALSE(defaults.token_budget.has_value());
}

// ---------------------------------------------------------------------------
// Code extraction

TEST_CASE("extract_last_code_block") {
    CHECK_FALSE(extract_last_code_block("no fences here").has_value());
    CHECK_FALSE(extract_last_code_block("").has_value());

    CHECK(extract_last_code_block("```solidity\ncontract A {}\n```") ==
          "contract A {}\n");

    // Last complete block wins.
    CHECK(extract_last_code_block("old:\n```solidity\nA\n```\nnew:\n```\nB\nC\n```\ntail") ==
          "B\nC\n");

    // An unterminated fence is ignored; the previous complete block stands.
    CHECK(extract_last_code_block("```sol\nA\n```\nand then\n```sol\nB\n") == "A\n");
    CHECK_FALSE(extract_last_code_block("```sol\nnever closed\n").has_value());

    // Indented fences count; inner indentation is preserved.
    CHECK(extract_last_code_block("  ```solidity\n    indented();\n  ```") ==
          "    indented();\n");

    // Empty block extracts as the empty string (callers reject blank code).
    CHECK(extract_last_code_block("```\n```") == "");
}

// ---------------------------------------------------------------------------
// Stopping predicates

TEST_CASE("is_perfect requires compile, a non-empty all-green suite, and no High") {
    FeedbackReport r;
    r.forge = testutil::forge_result(true, 3, 3);
    CHECK(is_perfect(r));

    r.findings = {testutil::finding(Severity::Medium, "assembly"),
                  testutil::finding(Severity::Low, "naming")};
    CHECK(is_perfect(r));  // only High blocks success

    r.findings.push_back(testutil::finding(Severity::High, "reentrancy-eth"));
    CHECK_FALSE(is_perfect(r));

    r.findings.clear();
    r.forge = testutil::forge_result(true, 0, 0);
    CHECK_FALSE(is_perfect(r));  // empty suite is no evidence

    r.forge = testutil::forge_result(false, 3, 3);
    CHECK_FALSE(is_perfect(r));

    r.forge = testutil::forge_result(true, 2, 3);
    CHECK_FALSE(is_perfect(r));
}

TEST_CASE("is_stagnant compares against the running best, not the last round") {
    CHECK_THROWS_AS(is_stagnant({}, 0), ValidationError);

    auto rates = [](std::initializer_list<std::pair<int, int>> list) {
        std::vector<FeedbackReport> h;
        for (auto [p, t] : list) h.push_back(report_with_rate(p, t, ""));
        return h;
    };

    // Needs n+1 observations before it can fire.
    CHECK_FALSE(is_stagnant(rates({{1, 4}}), 2));
    CHECK_FALSE(is_stagnant(rates({{1, 4}, {1, 4}}), 2));

    CHECK(is_stagnant(rates({{1, 4}, {1, 4}, {1, 4}}), 2));
    CHECK(is_stagnant(rates({{3, 4}, {2, 4}, {1, 4}}), 2));  // decline is not progress

    // A/B/A: returning to the old best must not reset the window.
    CHECK(is_stagnant(rates({{4, 5}, {2, 5}, {4, 5}}), 2));

    // Any strict improvement inside the window keeps the loop alive.
    CHECK_FALSE(is_stagnant(rates({{1, 4}, {2, 4}, {3, 4}}), 2));
    CHECK_FALSE(is_stagnant(rates({{1, 4}, {1, 4}, {2, 4}}), 2));

    // Improvement older than the window does not.
    CHECK(is_stagnant(rates({{1, 4}, {3, 4}, {3, 4}, {3, 4}}), 2));
    CHECK_FALSE(is_stagnant(rates({{1, 4}, {3, 4}, {3, 4}, {3, 4}}), 3));
}

TEST_CASE("is_looping is strict in tau") {
    const FeedbackReport a = report_with_rate(1, 2, "Compile: OK\nTests passed: 1/2\n");
    const FeedbackReport b = a;
    CHECK(is_looping(a, b, 0.9));   // identical: ratio 1.0 > 0.9
    CHECK_FALSE(is_looping(a, b, 1.0));  // strict comparison at the boundary

    const FeedbackReport c = report_with_rate(
        1, 2, "completely different feedback text about other matters entirely");
    CHECK_FALSE(is_looping(a, c, 0.9));
}

// ---------------------------------------------------------------------------
// Best tracking and selection

TEST_CASE("update_best replaces only on strictly better scores") {
    RunState state;
    Candidate c0{0, "v0", Score{true, 0.9, 0, 0, 0, std::nullopt}};
    Candidate c1{1, "v1", Score{true, 0.3, 0, 0, 0, std::nullopt}};
    Candidate c2{2, "v2", Score{true, 0.9, 0, 0, 0, std::nullopt}};
    Candidate c3{3, "v3", Score{true, 1.0, 0, 0, 0, std::nullopt}};

    CHECK_THROWS_AS(update_best(state, Candidate{0, "unscored", std::nullopt}),
                    ValidationError);

    update_best(state, c0);
    REQUIRE(state.best);
    CHECK(state.best->round == 0);

    update_best(state, c1);  // regression: best must survive
    CHECK(state.best->round == 0);
    CHECK(state.best->score->pass_rate == 0.9);

    update_best(state, c2);  // tie: earlier round is kept
    CHECK(state.best->round == 0);

    update_best(state, c3);  // strict improvement replaces
    CHECK(state.best->round == 3);
}

TEST_CASE("select_candidate policies") {
    RunState state;
    state.candidates = {
        {0, "v0", Score{true, 1.0, 2, 0, 0, std::nullopt}},
        {1, "v1", Score{true, 0.5, 0, 1, 0, std::nullopt}},
        {2, "v2", Score{true, 0.7, 0, 1, 0, std::nullopt}},
        {3, "v3", std::nullopt},
        {4, "v4", Score{false, 1.0, 0, 0, 0, std::nullopt}},
    };
    state.best = state.candidates[0];

    CHECK(select_candidate(state, SelectionPolicy::best_score).round == 0);
    // min_vuln: fewest (high, medium, low), then highest pass rate, then
    // earliest round. v1/v2 beat v0 on High; v2 beats v1 on pass rate.
    CHECK(select_candidate(state, SelectionPolicy::min_vuln).round == 2);

    RunState none;
    CHECK_THROWS_AS(select_candidate(none, SelectionPolicy::best_score), ValidationError);

    // min_vuln with no compiled candidate falls back to best_score.
    RunState uncompiled;
    uncompiled.candidates = {{0, "v0", Score{false, 0.0, 0, 0, 0, std::nullopt}}};
    uncompiled.best = uncompiled.candidates[0];
    CHECK(select_candidate(uncompiled, SelectionPolicy::min_vuln).round == 0);
}

// ---------------------------------------------------------------------------
// Pruning

namespace {

std::int64_t transcript_tokens(const std::vector<Message>& transcript) {
    std::int64_t n = 0;
    for (const auto& m : transcript) n += solharness::detail::message_tokens(m);
    return n;
}

std::vector<Message> round_trip_transcript(int rounds, int tool_words) {
    std::vector<Message> t = {make_message(Role::system, "system prompt"),
                              make_message(Role::user, "Target file: src/G.sol\n\nrequirement")};
    t.push_back(testutil::assistant_code(contract_body(0)));
    for (int r = 1; r <= rounds; ++r) {
        t.push_back(make_message(Role::user, "Compile: OK\nTests passed: 1/3\nFAIL t" +
                                                 std::to_string(r) + ": x\nFindings: 0\n\nFix."));
        t.push_back(testutil::assistant_tool_call("c" + std::to_string(r), "read_file",
                                                  "src/G.sol"));
        Message tool = make_message(Role::tool, "");
        tool.tool_call_id = "c" + std::to_string(r);
        for (int w = 0; w < tool_words; ++w) tool.content += "word" + std::to_string(w) + " ";
        t.push_back(tool);
        t.push_back(testutil::assistant_code(contract_body(r)));
    }
    return t;
}

}  // namespace

TEST_CASE("prune_messages protects the right messages and collapses the rest") {
    LoopConfig cfg;
    cfg.prune_keep_rounds = 2;
    const auto t = round_trip_transcript(4, 50);
    const auto pruned = prune_messages(t, cfg);
    REQUIRE(pruned.size() == t.size());  // structure is preserved, content shrinks

    // Protected: system, first user, every assistant, and rounds 3..4.
    CHECK(pruned[0] == t[0]);
    CHECK(pruned[1] == t[1]);
    CHECK(pruned[2] == t[2]);

    // Round 1 (indices 3..6) and round 2 (7..10) are prunable.
    CHECK(pruned[3].content == "Compile: OK\nTests passed: 1/3");  // headline + tests line
    CHECK(pruned[4] == t[4]);  // assistant with tool_calls untouched
    CHECK(pruned[5].content == "[pruned tool output: read_file, 50 tokens]");
    CHECK(pruned[5].tool_call_id == t[5].tool_call_id);
    CHECK(pruned[6] == t[6]);

    // Rounds 3 and 4 are verbatim.
    for (std::size_t i = 11; i < t.size(); ++i) CHECK(pruned[i] == t[i]);
}

TEST_CASE("prune_messages is the identity while within the keep window") {
    LoopConfig cfg;
    cfg.prune_keep_rounds = 2;
    CHECK(prune_messages(round_trip_transcript(2, 30), cfg) ==
          round_trip_transcript(2, 30));
    CHECK(prune_messages(round_trip_transcript(1, 30), cfg) ==
          round_trip_transcript(1, 30));
    const auto seed = std::vector<Message>{make_message(Role::system, "s"),
                                           make_message(Role::user, "u")};
    CHECK(prune_messages(seed, cfg) == seed);
}

TEST_CASE("prune_messages labels tool output with unknown call ids") {
    LoopConfig cfg;
    cfg.prune_keep_rounds = 1;
    std::vector<Message> t = {make_message(Role::system, "s"),
                              make_message(Role::user, "first")};
    Message orphanish = make_message(Role::tool, "five words of tool output");
    orphanish.tool_call_id = "never-declared";
    t.push_back(orphanish);
    t.push_back(make_message(Role::user, "round 1"));
    t.push_back(testutil::assistant_code(contract_body(1)));
    const auto pruned = prune_messages(t, cfg);
    CHECK(pruned[2].content == "[pruned tool output: unknown, 5 tokens]");
}

TEST_CASE("pruning halves a tool-dominated transcript") {
    LoopConfig cfg;
    cfg.prune_keep_rounds = 2;
    const auto t = round_trip_transcript(20, 800);

    // Precondition: tool output dominates the prompt.
    std::int64_t tool_tokens = 0;
    for (const auto& m : t) {
        if (m.role == Role::tool) tool_tokens += solharness::detail::message_tokens(m);
    }
    const std::int64_t full = transcript_tokens(t);
    REQUIRE(tool_tokens * 10 >= full * 7);

    const std::int64_t pruned = transcript_tokens(prune_messages(t, cfg));
    INFO("full=" << full << " pruned=" << pruned);
    CHECK(pruned * 2 <= full);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST_CASE("checkpoints are atomic, versioned, and fall back past corruption") {
    testutil::TempDir tmp;
    const fs::path dir = tmp.path() / "ckpt";

    RunState state;
    state.task_id = "t1";
    state.round = 0;
    state.transcript = {make_message(Role::system, "s")};
    state.candidates = {{0, contract_body(0), std::nullopt}};
    save_checkpoint(state, dir);
    CHECK(fs::is_regular_file(dir / "t1" / "round_0.json"));

    state.round = 1;
    state.candidates.push_back({1, contract_body(1), std::nullopt});
    save_checkpoint(state, dir);

    // No temp droppings anywhere.
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        CHECK(e.path().filename().string().find(".tmp") == std::string::npos);
    }

    // Highest round wins.
    auto loaded = load_checkpoint("t1", dir);
    REQUIRE(loaded);
    CHECK(loaded->round == 1);
    CHECK(loaded->candidates.size() == 2);

    // Corrupt the newest: fall back to round 0.
    testutil::write_file(dir / "t1" / "round_1.json", "{corrupt");
    loaded = load_checkpoint("t1", dir);
    REQUIRE(loaded);
    CHECK(loaded->round == 0);

    // A terminal state trumps every round file.
    RunState done = state;
    done.terminated = TerminationReason{TerminationKind::success, "done"};
    save_checkpoint(done, dir);
    CHECK(fs::is_regular_file(dir / "t1" / "terminal.json"));
    loaded = load_checkpoint("t1", dir);
    REQUIRE(loaded);
    REQUIRE(loaded->terminated);
    CHECK(loaded->terminated->kind == TerminationKind::success);

    // A corrupt terminal falls back to the round files.
    testutil::write_file(dir / "t1" / "terminal.json", "???");
    loaded = load_checkpoint("t1", dir);
    REQUIRE(loaded);
    CHECK_FALSE(loaded->terminated);
    CHECK(loaded->round == 0);

    // Unknown task: nothing.
    CHECK_FALSE(load_checkpoint("nope", dir).has_value());

    // Schema version mismatches are loud, not silent.
    json old = json{{"schema_version", 99}, {"task_id", "t2"}, {"round", 0},
                    {"transcript", json::array()}};
    testutil::write_json_file(dir / "t2" / "round_0.json", old);
    CHECK_THROWS_AS(load_checkpoint("t2", dir), CheckpointVersionError);
}

// ---------------------------------------------------------------------------
// Loop scenarios

TEST_CASE("loop: immediate success on a perfect first candidate") {
    LoopFixture fx;
    MockBackend llm({testutil::assistant_code(contract_body(0))});
    FakeVerifier verifier({perfect_round()});

    const RunState state = run_task(fx.task, llm, verifier, fx.cfg, fx.paths);

    REQUIRE(state.terminated);
    CHECK(state.terminated->kind == TerminationKind::success);
    CHECK(state.terminated->detail ==
          "all tests pass with no High findings at round 0");
    CHECK(state.candidates.size() == 1);
    CHECK(state.history.size() == 1);
    REQUIRE(state.best);
    CHECK(state.best->round == 0);
    CHECK(state.best->score->pass_rate == 1.0);

    // Seeded prompt shape.
    REQUIRE(state.transcript.size() == 3);
    CHECK(state.transcript[0].role == Role::system);
    CHECK(state.transcript[0].content == fx.cfg.coding_system_prompt);
    CHECK(state.transcript[1].content ==
          "Target file: src/Greeter.sol\n\n" + fx.task.requirement_full);
    CHECK(state.transcript[1].metadata.at("kind") == "requirement");
    CHECK(state.transcript[2].role == Role::assistant);

    REQUIRE(state.usage.size() == 1);
    CHECK(state.usage[0].phase == Phase::coding);
    CHECK(state.usage[0].round == 0);
    CHECK(state.usage[0].prompt_tokens > 0);

    // Terminal checkpoint exists; the work copy holds the candidate; the
    // task repo is untouched.
    CHECK(fs::is_regular_file(fx.ckpt() / "t1" / "terminal.json"));
    CHECK(testutil::slurp(fx.workdir() / "src" / "Greeter.sol") == contract_body(0));
    CHECK(testutil::slurp(fx.repo() / "src" / "Greeter.sol").find("contract Greeter {}") !=
          std::string::npos);
}

TEST_CASE("loop: refinement round carries feedback and improves to success") {
    LoopFixture fx;
    MockBackend llm({testutil::assistant_code(contract_body(0)),
                     testutil::assistant_code(contract_body(1))});
    FakeVerifier verifier({fail_round(0, 0, 2), perfect_round()});

    const RunState state = run_task(fx.task, llm, verifier, fx.cfg, fx.paths);

    REQUIRE(state.terminated);
    CHECK(state.terminated->kind == TerminationKind::success);
    CHECK(state.candidates.size() == 2);
    CHECK(state.history.size() == 2);
    CHECK(state.round == 1);
    REQUIRE(state.best);
    CHECK(state.best->round == 1);
    CHECK(state.best->code == contract_body(1));

    // The feedback message is the rendered report plus the instruction.
    REQUIRE(state.transcript.size() == 5);
    const Message& feedback = state.transcript[3];
    CHECK(feedback.role == Role::user);
    CHECK(feedback.content ==
          state.history[0].rendered_text + "\n" + fx.cfg.refine_instruction);
    CHECK(feedback.metadata.at("kind") == "feedback");
    CHECK(feedback.metadata.at("phase") == "refine");
    CHECK(feedback.metadata.at("round") == "1");

    REQUIRE(state.usage.size() == 2);
    CHECK(state.usage[1].phase == Phase::refine);
    CHECK(state.usage[1].round == 1);

    // Both candidates ended up scored.
    CHECK(state.candidates[0].score.has_value());
    CHECK(state.candidates[1].score.has_value());
    CHECK(testutil::slurp(fx.workdir() / "src" / "Greeter.sol") == contract_body(1));
}

TEST_CASE("loop: stagnation fires when the window sees no new best") {
    LoopFixture fx;
    MockBackend llm({testutil::assistant_code(contract_body(0)),
                     testutil::assistant_code(contract_body(1)),
                     testutil::assistant_code(contract_body(2))});
    // Declining pass rates: 3/4, 2/4, 1/4 — never above the running best.
    FakeVerifier verifier({fail_round(0, 3, 4), fail_round(1, 2, 4), fail_round(2, 1, 4)});

    const RunState state = run_task(fx.task, llm, verifier, fx.cfg, fx.paths);

    REQUIRE(state.terminated);
    CHECK(state.terminated->kind == TerminationKind::stagnation);
    CHECK(state.terminated->detail == "pass rate did not improve for 2 rounds");
    CHECK(state.candidates.size() == 3);
    CHECK(state.history.size() == 3);

    // Best tracking kept the earliest (and only) high-water mark.
    REQUIRE(state.best);
    CHECK(state.best->round == 0);
    CHECK(state.best->score->pass_rate == 0.75);
}

TEST_CASE("loop: oscillation fires on nearly identical consecutive feedback") {
    LoopFixture fx;
    MockBackend llm({testutil::assistant_code(contract_body(0)),
                     testutil::assistant_code(contract_body(1)),
                     testutil::assistant_code(contract_body(2))});
    // Identical feedback in rounds 0 and 1 (similarity 1.0 > tau), with
    // distinct candidate code so duplicate detection stays quiet.
    FakeVerifier verifier({fail_round(7, 1, 4), fail_round(7, 1, 4), fail_round(7, 1, 4)});

    const RunState state = run_task(fx.task, llm, verifier, fx.cfg, fx.paths);

    REQUIRE(state.terminated);
    CHECK(state.terminated->kind == TerminationKind::oscillation);
    CHECK(state.candidates.size() == 2);
    CHECK(state.history.size() == 2);
    CHECK(state.history[0].rendered_text == state.history[1].rendered_text);
}

TEST_CASE("loop: duplicate candidate stops as code_hash_repeat, unscored") {
    LoopFixture fx;
    MockBackend llm({testutil::assistant_code(contract_body(0)),
                     testutil::assistant_code(contract_body(0))});  // same code again
    FakeVerifier verifier({fail_round(0, 1, 4)});

    const RunState state = run_task(fx.task, llm, verifier, fx.cfg, fx.paths);

    REQUIRE(state.terminated);
    CHECK(state.terminated->kind == TerminationKind::code_hash_repeat);
    CHECK(state.terminated->detail == "candidate at round 1 repeats earlier code");
    REQUIRE(state.candidates.size() == 2);
    CHECK(state.candidates[1].code == state.candidates[0].code);
    CHECK_FALSE(state.candidates[1].score.has_value());  // never verified
    CHECK(state.history.size() == 1);
}

TEST_CASE("loop: round budget exhaustion verifies the final candidate") {
    LoopFixture fx;
    fx.cfg.max_rounds = 2;
    MockBackend llm({testutil::assistant_code(contract_body(0)),
                     testutil::assistant_code(contract_body(1)),
                     testutil::assistant_code(contract_body(2))});

    SECTION("final candidate turns out perfect") {
        FakeVerifier verifier({fail_round(0, 1, 4), fail_round(1, 2, 4), perfect_round()});
        const RunState state = run_task(fx.task, llm, verifier, fx.cfg, fx.paths);
        REQUIRE(state.terminated);
        CHECK(state.terminated->kind == TerminationKind::max_rounds);
        CHECK(state.terminated->detail ==
              "round budget exhausted; final candidate verified perfect");
        CHECK(state.candidates.size() == 3);
        CHECK(state.history.size() == 3);
        for (const auto& c : state.candidates) CHECK(c.score.has_value());
        REQUIRE(state.best);
        CHECK(state.best->round == 2);
    }
    SECTION("final candidate still imperfect") {
        FakeVerifier verifier({fail_round(0, 1, 4), fail_round(1, 2, 4), fail_round(2, 3, 4)});
        const RunState state = run_task(fx.task, llm, verifier, fx.cfg, fx.paths);
        REQUIRE(state.terminated);
        CHECK(state.terminated->kind == TerminationKind::max_rounds);
        CHECK(state.terminated->detail == "round budget of 2 refinement rounds exhausted");
        CHECK(state.history.size() == 3);
        REQUIRE(state.best);
        CHECK(state.best->round == 2);  // 3/4 is the best rate seen
    }
}

TEST_CASE("loop: reply without a code block terminates as empty_output") {
    LoopFixture fx;
    FakeVerifier verifier(std::vector<FakeVerifier::RoundScript>{});

    SECTION("no fenced block at all") {
        MockBackend llm({make_message(Role::assistant, "I cannot help with that.")});
        const RunState state = run_task(fx.task, llm, verifier, fx.cfg, fx.paths);
        REQUIRE(state.terminated);
        CHECK(state.terminated->kind == TerminationKind::empty_output);
        CHECK(state.candidates.empty());
        CHECK(state.history.empty());
        CHECK(fs::is_regular_file(fx.ckpt() / "t1" / "terminal.json"));
    }
    SECTION("whitespace-only block") {
        MockBackend llm({make_message(Role::assistant, "```\n   \n```")});
        const RunState state = run_task(fx.task, llm, verifier, fx.cfg, fx.paths);
        REQUIRE(state.terminated);
        CHECK(state.terminated->kind == TerminationKind::empty_output);
    }
}

TEST_CASE("loop: script exhaustion terminates as llm_error") {
    LoopFixture fx;
    MockBackend llm({testutil::assistant_code(contract_body(0))});
    FakeVerifier verifier({fail_round(0, 1, 4)});

    const RunState state = run_task(fx.task, llm, verifier, fx.cfg, fx.paths);
    REQUIRE(state.terminated);
    CHECK(state.terminated->kind == TerminationKind::llm_error);
    CHECK(state.terminated->detail.find("exhausted") != std::string::npos);
    CHECK(state.candidates.size() == 1);
    CHECK(state.history.size() == 1);
    // The work done before the failure is preserved and scored.
    CHECK(state.candidates[0].score.has_value());
}

TEST_CASE("loop: token budget") {
    LoopFixture fx;

    SECTION("zero budget stops before any model call") {
        fx.cfg.token_budget = 0;
        PoisonBackend llm;
        PoisonVerifier verifier;
        const RunState state = run_task(fx.task, llm, verifier, fx.cfg, fx.paths);
        REQUIRE(state.terminated);
        CHECK(state.terminated->kind == TerminationKind::token_budget);
        CHECK(state.terminated->detail == "token budget exhausted before coding round");
        CHECK(state.candidates.empty());
        CHECK(state.usage.empty());
    }
    SECTION("budget checked at the top of each iteration") {
        fx.cfg.token_budget = 1;  // exceeded right after the coding round
        MockBackend llm({testutil::assistant_code(contract_body(0))});
        PoisonVerifier verifier;  // must never be reached
        const RunState state = run_task(fx.task, llm, verifier, fx.cfg, fx.paths);
        REQUIRE(state.terminated);
        CHECK(state.terminated->kind == TerminationKind::token_budget);
        CHECK(state.candidates.size() == 1);
        CHECK(state.history.empty());
        CHECK(state.total_tokens() >= 1);
        CHECK(state.terminated->detail ==
              "token budget exhausted after " + std::to_string(state.total_tokens()) +
                  " tokens");
    }
}

TEST_CASE("loop: zero wall-clock budget stops at the first iteration") {
    LoopFixture fx;
    fx.cfg.wall_clock_budget = std::chrono::milliseconds(0);
    MockBackend llm({testutil::assistant_code(contract_body(0))});
    PoisonVerifier verifier;

    const RunState state = run_task(fx.task, llm, verifier, fx.cfg, fx.paths);
    REQUIRE(state.terminated);
    CHECK(state.terminated->kind == TerminationKind::wall_clock);
    CHECK(state.terminated->detail == "wall-clock budget exhausted");
    CHECK(state.candidates.size() == 1);  // coding round already happened
    CHECK(state.history.empty());
}

TEST_CASE("loop: operator stop") {
    LoopFixture fx;

    SECTION("before the coding round") {
        PoisonBackend llm;
        PoisonVerifier verifier;
        RunHooks hooks;
        hooks.stop_requested = [] { return true; };
        const RunState state = run_task(fx.task, llm, verifier, fx.cfg, fx.paths, hooks);
        REQUIRE(state.terminated);
        CHECK(state.terminated->kind == TerminationKind::operator_stop);
        CHECK(state.terminated->detail == "stop requested before coding round");
        CHECK(state.candidates.empty());
    }
    SECTION("between rounds") {
        MockBackend llm({testutil::assistant_code(contract_body(0))});
        PoisonVerifier verifier;
        int calls = 0;
        RunHooks hooks;
        hooks.stop_requested = [&] { return ++calls > 1; };  // false once, then stop
        const RunState state = run_task(fx.task, llm, verifier, fx.cfg, fx.paths, hooks);
        REQUIRE(state.terminated);
        CHECK(state.terminated->kind == TerminationKind::operator_stop);
        CHECK(state.terminated->detail == "stop requested at round 1");
        CHECK(state.candidates.size() == 1);
    }
}

TEST_CASE("loop: failed tool calls accumulate to the cap") {
    LoopFixture fx;
    fx.cfg.tool_failure_cap = 2;
    MockBackend llm({testutil::assistant_code(contract_body(0)),
                     testutil::assistant_tool_call("c1", "read_file", "test/Greeter.t.sol"),
                     testutil::assistant_tool_call("c2", "read_file", "nope.sol"),
                     testutil::assistant_code(contract_body(1))});
    FakeVerifier verifier({fail_round(0, 1, 4)});

    const RunState state = run_task(fx.task, llm, verifier, fx.cfg, fx.paths);

    REQUIRE(state.terminated);
    CHECK(state.terminated->kind == TerminationKind::tool_failure_cap);
    CHECK(state.terminated->detail == "2 failed tool calls reached the cap");
    CHECK(state.tool_failures == 2);
    CHECK(state.candidates.size() == 2);  // the round still completed

    // Both refusals came back as tool messages the agent could read.
    std::vector<std::string> tool_contents;
    for (const auto& m : state.transcript) {
        if (m.role == Role::tool) tool_contents.push_back(m.content);
    }
    REQUIRE(tool_contents.size() == 2);
    CHECK(tool_contents[0].rfind("error: access denied", 0) == 0);
    CHECK(tool_contents[1] == "error: no such file: nope.sol");
}

TEST_CASE("loop: tool-call cap salvages the code seen so far") {
    LoopFixture fx;
    fx.cfg.tool_call_cap = 2;
    Message greedy = testutil::assistant_code(contract_body(1), "Checking, then fixing:");
    greedy.tool_calls = {ToolCall{"c1", "list_directory", json{{"path", "."}}},
                         ToolCall{"c2", "read_file", json{{"path", "src/Greeter.sol"}}}};
    MockBackend llm({testutil::assistant_code(contract_body(0)), greedy});
    FakeVerifier verifier({fail_round(0, 1, 4), perfect_round()});

    const RunState state = run_task(fx.task, llm, verifier, fx.cfg, fx.paths);

    REQUIRE(state.terminated);
    CHECK(state.terminated->kind == TerminationKind::success);
    REQUIRE(state.candidates.size() == 2);
    CHECK(state.candidates[1].code == contract_body(1));  // salvaged from the reply

    int tool_messages = 0;
    for (const auto& m : state.transcript) {
        if (m.role == Role::tool) ++tool_messages;
    }
    CHECK(tool_messages == 2);  // both calls were still answered
}

TEST_CASE("loop: sandboxed tools see the work copy, not the task repo") {
    LoopFixture fx;
    MockBackend llm({testutil::assistant_code(contract_body(0)),
                     testutil::assistant_tool_call("c1", "list_directory", "."),
                     testutil::assistant_tool_call("c2", "read_file", "src/Greeter.sol"),
                     testutil::assistant_code(contract_body(1))});
    FakeVerifier verifier({fail_round(0, 1, 4), perfect_round()});

    const std::string repo_src_before = testutil::slurp(fx.repo() / "src" / "Greeter.sol");
    const RunState state = run_task(fx.task, llm, verifier, fx.cfg, fx.paths);

    REQUIRE(state.terminated);
    CHECK(state.terminated->kind == TerminationKind::success);

    std::vector<const Message*> tool_msgs;
    for (const auto& m : state.transcript) {
        if (m.role == Role::tool) tool_msgs.push_back(&m);
    }
    REQUIRE(tool_msgs.size() == 2);

    // Listing shows the work copy with the test suite denied.
    const auto size_of = [&](const char* name) {
        return std::to_string(fs::file_size(fx.workdir() / name));
    };
    CHECK(tool_msgs[0]->content == "README.md (" + size_of("README.md") +
                                       " bytes)\nfoundry.toml (" + size_of("foundry.toml") +
                                       " bytes)\nsrc/");
    // Reading the target returns the current candidate, not the repo stub.
    CHECK(tool_msgs[1]->content == contract_body(0));

    // The task repository is never written.
    CHECK(testutil::slurp(fx.repo() / "src" / "Greeter.sol") == repo_src_before);
    CHECK_FALSE(fs::exists(fx.repo() / "out"));
}

TEST_CASE("loop: summary mode seeds the short requirement") {
    LoopFixture fx;
    fx.task.requirement_summary = "Greeter with greet() and owner-gated setMessage.";
    MockBackend llm({testutil::assistant_code(contract_body(0))});
    FakeVerifier verifier({perfect_round()});

    const RunState state =
        run_task(fx.task, llm, verifier, fx.cfg, fx.paths, {}, /*summary_mode=*/true);
    CHECK(state.summary_mode);
    CHECK(state.transcript[1].content ==
          "Target file: src/Greeter.sol\n\n" + *fx.task.requirement_summary);

    // Without a summary on the task, summary mode is a configuration error.
    LoopFixture fx2;
    MockBackend llm2({testutil::assistant_code(contract_body(0))});
    FakeVerifier verifier2({perfect_round()});
    CHECK_THROWS_AS(
        run_task(fx2.task, llm2, verifier2, fx2.cfg, fx2.paths, {}, /*summary_mode=*/true),
        ValidationError);
}

TEST_CASE("loop: checkpoint after round r holds r+1 candidates and r reports") {
    LoopFixture fx;
    fx.cfg.max_rounds = 3;
    MockBackend llm({testutil::assistant_code(contract_body(0)),
                     testutil::assistant_code(contract_body(1)),
                     testutil::assistant_code(contract_body(2))});
    FakeVerifier verifier({fail_round(0, 1, 4), fail_round(1, 2, 4), perfect_round()});

    std::vector<std::pair<std::size_t, std::size_t>> snapshots;
    RunHooks hooks;
    hooks.after_round = [&](const RunState& s) {
        snapshots.emplace_back(s.candidates.size(), s.history.size());
        CHECK(s.candidates.size() == static_cast<std::size_t>(s.round) + 1);
        CHECK(s.history.size() == static_cast<std::size_t>(s.round));
    };
    run_task(fx.task, llm, verifier, fx.cfg, fx.paths, hooks);

    REQUIRE(snapshots.size() == 3);
    CHECK(snapshots[0] == std::pair<std::size_t, std::size_t>{1, 0});
    CHECK(snapshots[1] == std::pair<std::size_t, std::size_t>{2, 1});
    CHECK(snapshots[2] == std::pair<std::size_t, std::size_t>{3, 2});

    // The same invariant holds for the files on disk.
    for (int r = 0; r <= 2; ++r) {
        auto state = solharness::detail::try_load_state_file(
            fx.ckpt() / "t1" / ("round_" + std::to_string(r) + ".json"));
        REQUIRE(state);
        CHECK(state->round == r);
        CHECK(state->candidates.size() == static_cast<std::size_t>(r) + 1);
        CHECK(state->history.size() == static_cast<std::size_t>(r));
    }
}

namespace {

struct CrashAfterRound : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::vector<Message> three_round_script() {
    return {testutil::assistant_code(contract_body(0)),
            testutil::assistant_code(contract_body(1)),
            testutil::assistant_code(contract_body(2))};
}

std::vector<FakeVerifier::RoundScript> three_round_verifier() {
    return {fail_round(0, 0, 2), fail_round(1, 1, 2), perfect_round()};
}

}  // namespace

TEST_CASE("loop: crash, resume, and replay to a byte-identical terminal state") {
    // Reference: the uninterrupted run.
    LoopFixture ref;
    MockBackend ref_llm(three_round_script());
    FakeVerifier ref_verifier(three_round_verifier());
    const RunState ref_state = run_task(ref.task, ref_llm, ref_verifier, ref.cfg, ref.paths);
    REQUIRE(ref_state.terminated);
    CHECK(ref_state.terminated->kind == TerminationKind::success);
    const std::string ref_bytes = testutil::slurp(ref.ckpt() / "t1" / "terminal.json");
    REQUIRE_FALSE(ref_bytes.empty());

    // Crash after round 1 (two candidates on disk, no terminal state).
    LoopFixture fx;
    {
        MockBackend llm(three_round_script());
        FakeVerifier verifier(three_round_verifier());
        RunHooks hooks;
        hooks.after_round = [](const RunState& s) {
            if (s.round == 1) throw CrashAfterRound("simulated crash");
        };
        CHECK_THROWS_AS(run_task(fx.task, llm, verifier, fx.cfg, fx.paths, hooks),
                        CrashAfterRound);
        CHECK(fs::is_regular_file(fx.ckpt() / "t1" / "round_1.json"));
        CHECK_FALSE(fs::exists(fx.ckpt() / "t1" / "terminal.json"));
    }

    // Resume with fresh instances: replays the tail and finishes.
    {
        MockBackend llm(three_round_script());
        FakeVerifier verifier(three_round_verifier());
        const RunState resumed =
            resume_or_run(fx.task, llm, verifier, fx.cfg, fx.paths);
        REQUIRE(resumed.terminated);
        CHECK(resumed.terminated->kind == TerminationKind::success);
        CHECK(resumed == ref_state);
    }
    CHECK(testutil::slurp(fx.ckpt() / "t1" / "terminal.json") == ref_bytes);

    // A further rerun is a no-op: no model or verifier calls at all.
    {
        PoisonBackend poison_llm;
        PoisonVerifier poison_verifier;
        const RunState replayed =
            resume_or_run(fx.task, poison_llm, poison_verifier, fx.cfg, fx.paths);
        CHECK(replayed == ref_state);
    }
    CHECK(testutil::slurp(fx.ckpt() / "t1" / "terminal.json") == ref_bytes);
}

TEST_CASE("loop: resume restores the work copy before verifying") {
    LoopFixture fx;
    {
        MockBackend llm(three_round_script());
        FakeVerifier verifier(three_round_verifier());
        RunHooks hooks;
        hooks.after_round = [](const RunState& s) {
            if (s.round == 1) throw CrashAfterRound("simulated crash");
        };
        CHECK_THROWS_AS(run_task(fx.task, llm, verifier, fx.cfg, fx.paths, hooks),
                        CrashAfterRound);
    }
    // Wipe the work tree entirely: resume must re-materialize it.
    fs::remove_all(fx.paths.work_root);

    MockBackend llm(three_round_script());
    FakeVerifier verifier(three_round_verifier());
    const RunState resumed = resume_or_run(fx.task, llm, verifier, fx.cfg, fx.paths);
    REQUIRE(resumed.terminated);
    CHECK(resumed.terminated->kind == TerminationKind::success);
    CHECK(testutil::slurp(fx.workdir() / "src" / "Greeter.sol") == contract_body(2));
}
