#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "model_fixtures.hpp"
#include "uniso/error.hpp"
#include "uniso/harness.hpp"

using namespace uniso;
using namespace uniso::harness;
namespace fs = std::filesystem;

namespace {

tasks::TaskSpec builtin(const std::string& id) {
  for (const auto& t : tasks::builtin_suite())
    if (t.id == id) return t;
  throw std::runtime_error(id);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("uniso-test-" + name);
  fs::remove_all(p);
  return p;
}

// Small enough that a full pipeline run takes a few seconds.
RunConfig tiny_run(const fs::path& out) {
  RunConfig c = default_run_config();
  c.model = fixtures::small_config(model::Variant::T, 16);
  c.model.max_len = 160;
  c.model.max_target_len = 6;
  c.train.epochs = 1;
  c.train.batch_size = 16;
  c.train.lr = 1e-3;
  c.train.warmup_steps = 2;
  c.train.regressor_epochs = 2;
  c.budget = 40;
  c.final_count = 8;
  c.dataset_size = 100;
  c.sig_digits = 3;
  c.task_filter = {"Sphere8", "OneMax12"};
  c.out_dir = out.string();
  return c;
}

}  // namespace

TEST_CASE("evaluate_candidates boundaries") {
  const auto t = builtin("OneMax12");
  const auto d = tasks::gen_offline_dataset(t, 200, tasks::Protocol::Middle50, 1);
  const std::size_t arg = static_cast<std::size_t>(std::max_element(d.scores.begin(), d.scores.end()) - d.scores.begin());
  const auto same = evaluate_candidates(t, {d.designs[arg]}, d.best(), t.y_min, t.y_max);
  CHECK(same.best == d.best());
  CHECK_FALSE(same.exceeds);

  const auto ones = evaluate_candidates(t, {Design(12, 1.0)}, d.best(), t.y_min, t.y_max);
  CHECK(ones.best == 12.0);
  CHECK(ones.exceeds);
  CHECK(d.best() < 12.0);

  const auto lo = evaluate_candidates(t, {Design(12, 0.0)}, d.best(), 0.0, 12.0);
  CHECK(lo.normalized_best == 0.0);
  const auto top = evaluate_candidates(t, {Design(12, 1.0)}, d.best(), 0.0, 12.0);
  CHECK(top.normalized_best == 1.0);

  const auto mixed = evaluate_candidates(t, {Design(12, 0.0), Design(12, 1.0), d.designs[0]}, d.best(), 0.0, 12.0);
  CHECK(mixed.candidates == 3);
  CHECK(mixed.median == d.scores[0]);

  CHECK_THROWS_AS(evaluate_candidates(t, {}, d.best(), 0.0, 12.0), DomainError);
  CHECK_THROWS_AS(evaluate_candidates(t, {Design(3, 0.0)}, d.best(), 0.0, 12.0), DomainError);
}

TEST_CASE("rank helpers") {
  CHECK(average_ranks({3.0, 1.0, 2.0}) == std::vector<double>{3.0, 1.0, 2.0});
  CHECK(average_ranks({1.0, 1.0, 2.0}) == std::vector<double>{1.5, 1.5, 3.0});
  CHECK(average_ranks({5.0, 5.0, 5.0}) == std::vector<double>{2.0, 2.0, 2.0});
  const std::vector<double> a = {0.1, 0.5, 0.2, 0.9, 0.3};
  CHECK(spearman(a, a) == doctest::Approx(1.0).epsilon(1e-15));
  std::vector<double> rev(a.size());
  std::transform(a.begin(), a.end(), rev.begin(), [](double v) { return -v; });
  CHECK(spearman(a, rev) == doctest::Approx(-1.0).epsilon(1e-15));
  // Monotone transforms do not change the value.
  std::vector<double> e(a.size());
  std::transform(a.begin(), a.end(), e.begin(), [](double v) { return std::exp(10 * v); });
  CHECK(spearman(a, e) == doctest::Approx(1.0).epsilon(1e-15));
  // Hand value: ranks (1,2,3,4) vs (2,1,4,3) -> 1 - 6*4/(4*15) = 0.6.
  CHECK(spearman({1, 2, 3, 4}, {2, 1, 4, 3}) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(spearman({1, 2, 3}, {7, 7, 7}) == 0.0);
  CHECK_THROWS_AS(spearman({1, 2}, {1}), ShapeError);
}

TEST_CASE("report_ranks") {
  auto report = [](const std::string& name, std::vector<double> best) {
    EvalReport r;
    r.method = name;
    const char* ids[] = {"A", "B", "C"};
    for (std::size_t i = 0; i < best.size(); ++i) {
      TaskMetrics m;
      m.task = ids[i];
      m.best = best[i];
      r.tasks.push_back(m);
    }
    return r;
  };
  {
    const auto t = report_ranks({{"only", report("only", {1, 2, 3})}});
    CHECK(t.ranks[0] == std::vector<double>{1, 1, 1});
    CHECK(t.mean[0] == 1.0);
    CHECK(t.stddev[0] == 0.0);
  }
  {
    const auto t = report_ranks({{"good", report("good", {5, 5, 5})}, {"bad", report("bad", {1, 2, 3})}});
    const auto g = std::find(t.methods.begin(), t.methods.end(), "good") - t.methods.begin();
    CHECK(t.ranks[static_cast<std::size_t>(g)] == std::vector<double>{1, 1, 1});
    CHECK(t.ranks[static_cast<std::size_t>(1 - g)] == std::vector<double>{2, 2, 2});
  }
  {
    const auto t = report_ranks({{"x", report("x", {5, 1, 3})}, {"y", report("y", {5, 2, 1})}});
    CHECK(t.ranks[0] == std::vector<double>{1.5, 2, 1});
    CHECK(t.ranks[1] == std::vector<double>{1.5, 1, 2});
    CHECK(t.mean[0] == doctest::Approx(1.5));
    CHECK(t.stddev[0] == doctest::Approx(std::sqrt(1.0 / 6.0)));
  }
  CHECK_THROWS_AS(report_ranks({{"x", report("x", {1, 2, 3})}, {"y", report("y", {1, 2})}}), DomainError);
  CHECK_THROWS_AS(report_ranks({}), DomainError);

  std::stringstream ss;
  write_rank_table(ss, report_ranks({{"x", report("x", {5, 1, 3})}}));
  CHECK(ss.str().find("1.00 +- 0.00") != std::string::npos);
}

TEST_CASE("report file round trip") {
  EvalReport r;
  r.method = "UniSO-T/improved/ea";
  r.tasks.push_back({"Sphere8", -40.5, -12.25, -30.0, 0.9, 0.7, true, 128});
  r.tasks.push_back({"OneMax12", 9, 9, 7, 0.75, 0.5833333333333334, false, 128});
  std::stringstream ss;
  write_report_jsonl(ss, r);
  const auto back = read_report_jsonl(ss);
  REQUIRE(back.tasks.size() == 2);
  CHECK(back.method == r.method);
  CHECK(back.tasks[1].normalized_median == r.tasks[1].normalized_median);
  CHECK(back.tasks[0].exceeds);
  std::stringstream table;
  write_report_table(table, r);
  CHECK(table.str().find("exceeds D(best) on 1 of 2 tasks") != std::string::npos);
}

TEST_CASE("run config JSON") {
  RunConfig c = default_run_config();
  c.variant = model::Variant::N;
  c.optimizer = Optimizer::Bo;
  c.seeds = {3, 4};
  c.bo.q = 5;
  c.train.epochs = 7;
  const nlohmann::json j = c;
  const RunConfig back = j.get<RunConfig>();
  CHECK(nlohmann::json(back).dump() == j.dump());
  const RunConfig partial = nlohmann::json::parse(R"({"budget": 10, "model": {"d_model": 32, "head_dim": 8}})").get<RunConfig>();
  CHECK(partial.budget == 10);
  CHECK(partial.model.d_model == 32);
  CHECK(partial.model.n_layers == 2);
  RunConfig bad = default_run_config();
  bad.seeds.clear();
  CHECK_THROWS_AS(bad.validate(), DomainError);
  bad = default_run_config();
  bad.suite_path = "/nonexistent/suite.json";
  CHECK_THROWS_AS(bad.validate(), DomainError);
  CHECK_THROWS_AS(parse_optimizer("sgd"), DomainError);
}

TEST_CASE("training data and scorer glue") {
  const auto t = builtin("Sphere8");
  const auto d = tasks::gen_offline_dataset(t, 100, tasks::Protocol::Middle50, 2, 3);
  const auto mc = fixtures::small_config(model::Variant::T, 16);
  const auto data = build_train_data({t}, {d}, mc, 3);
  REQUIRE(data.examples.size() == 100);
  const text::Vocabulary vocab(mc.e_max);
  for (std::size_t i = 0; i < 100; ++i) {
    const double y = text::p10_decode(data.examples[i].target, vocab);
    CHECK(std::abs(y - d.scores[i]) <= 0.005 * std::abs(d.scores[i]));
    CHECK(data.examples[i].y_norm == ynorm::apply(d.stats, d.scores[i]));
  }
  CHECK(text::detokenize(data.examples[0].input).find("sphere, 8 real") != std::string::npos);
  const auto [lo, hi] = std::minmax_element(d.scores.begin(), d.scores.end());
  CHECK(decode_failure_score(d) == *lo - (*hi - *lo) - 1.0);
  CHECK_THROWS_AS(build_train_data({t}, {}, mc, 3), ShapeError);
}

TEST_CASE("OOD Spearman of an untrained model is near zero") {
  const auto t = builtin("Levy10");
  auto mc = fixtures::small_config(model::Variant::N, 16);
  mc.max_len = 200;
  std::vector<double> rhos;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto d = tasks::gen_offline_dataset(t, 200, tasks::Protocol::Middle50, seed, 3);
    const auto s = model::init_model(mc, seed);
    const auto r = spearman_ood(s, t, d, 3, 200, seed);
    CHECK(r.points == 200);
    rhos.push_back(r.rho);
  }
  std::sort(rhos.begin(), rhos.end());
  CHECK(std::abs(rhos[2]) < 0.2);

  const auto d = tasks::gen_offline_dataset(t, 200, tasks::Protocol::Middle50, 0, 3);
  CHECK_THROWS_AS(spearman_ood(model::init_model(mc, 0), t, d, 3, 200, 0, 10), DomainError);
}

TEST_CASE("embedding export shape and determinism") {
  const fs::path dir = scratch("emb");
  fs::create_directories(dir);
  auto mc = fixtures::small_config(model::Variant::T, 16);
  mc.max_len = 200;
  const auto s = model::init_model(mc, 4);
  const std::vector<tasks::TaskSpec> ts = {builtin("Sphere8"), builtin("SeqMatch8")};
  const std::vector<tasks::OfflineDataset> ds = {tasks::gen_offline_dataset(ts[0], 100, tasks::Protocol::Middle50, 1, 3),
                                                 tasks::gen_offline_dataset(ts[1], 120, tasks::Protocol::Uniform, 1, 3)};
  std::stringstream a;
  export_embeddings(a, s, ts, ds, 3);
  std::size_t rows = 0;
  std::string line;
  while (std::getline(a, line)) {
    ++rows;
    CHECK(static_cast<std::size_t>(std::count(line.begin(), line.end(), '\t')) + 1 == 2 + mc.d_model + mc.proj_dim);
  }
  CHECK(rows == 220);

  model::save_checkpoint(s, (dir / "m.ckpt").string());
  const auto back = model::load_checkpoint((dir / "m.ckpt").string());
  std::stringstream b;
  export_embeddings(b, back, ts, ds, 3);
  CHECK(a.str() == b.str());
  fs::remove_all(dir);
}

TEST_CASE("attention export") {
  auto mc = fixtures::small_config(model::Variant::T, 16);
  mc.max_len = 200;
  auto s = model::init_model(mc, 5);
  const std::vector<tasks::TaskSpec> ts = {builtin("Levy10"), builtin("OneMax12")};
  const std::vector<tasks::OfflineDataset> ds = {tasks::gen_offline_dataset(ts[0], 100, tasks::Protocol::Middle50, 1, 3),
                                                 tasks::gen_offline_dataset(ts[1], 100, tasks::Protocol::Middle50, 1, 3)};
  const auto rows = attention_rows(s, ts, ds, 3, 8);
  REQUIRE(rows.size() == 2);
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(rows[k].inputs == 8);
    CHECK(std::abs(std::accumulate(rows[k].shares.begin(), rows[k].shares.end(), 0.0) - 1.0) < 1e-9);
    std::size_t tokens = 0;
    for (std::size_t i = 0; i < 8; ++i) tokens += input_tokens(ts[k], ds[k].designs[i], 3).size();
    CHECK(std::accumulate(rows[k].counts.begin(), rows[k].counts.end(), std::size_t{0}) == tokens);
    for (std::size_t c : rows[k].counts) CHECK(c > 0);
  }

  // Zero query weights make every attention row uniform, so shares equal
  // token-count fractions.
  for (std::size_t l = 0; l < mc.n_layers; ++l) {
    auto& w = s.params.value("enc." + std::to_string(l) + ".wq");
    std::fill(w.storage().begin(), w.storage().end(), 0.0);
  }
  const auto uni = attention_rows(s, ts, ds, 3, 1);
  for (const auto& r : uni) {
    const double total = static_cast<double>(std::accumulate(r.counts.begin(), r.counts.end(), std::size_t{0}));
    for (std::size_t c = 0; c < model::kTokenCategories; ++c)
      CHECK(r.shares[c] == doctest::Approx(static_cast<double>(r.counts[c]) / total).epsilon(1e-12));
  }

  std::stringstream ss;
  export_attention(ss, rows);
  std::string header, first;
  std::getline(ss, header);
  std::getline(ss, first);
  CHECK(header.rfind("task\tinputs\tshare_", 0) == 0);
  CHECK(first.rfind("Levy10\t8\t", 0) == 0);
}

TEST_CASE("fraction_above") {
  ad::Tensor z({3, 1}, {0.0, 1.0, 2.0});
  // ratios (0,1)=1, (0,2)=1.5, (1,2)=2
  CHECK(fraction_above(z, {0, 1, 3}, 1.5) == doctest::Approx(1.0 / 3.0));
  CHECK(fraction_above(z, {0, 1, 3}, 0.5) == 1.0);
  CHECK_THROWS_AS(fraction_above(ad::Tensor({1, 1}, {0.0}), {0}, 1.0), DomainError);
}

TEST_CASE("pipeline determinism, isolation and stage errors") {
  const fs::path a = scratch("run-a"), b = scratch("run-b"), v = scratch("run-v");
  const RunConfig ca = tiny_run(a);
  const auto ra = run_pipeline(ca);
  const auto rb = run_pipeline(tiny_run(b));
  REQUIRE(ra.size() == 1);
  CHECK(ra[0].report.tasks.size() == 2);
  for (const char* f : {"report.jsonl", "report.txt", "model.ckpt", "candidates/Sphere8.jsonl", "data/OneMax12.jsonl"}) {
    CHECK_MESSAGE(slurp(a / "seed-0" / f) == slurp(b / "seed-0" / f), f);
    CHECK(!slurp(a / "seed-0" / f).empty());
  }
  CHECK(ra[0].searches[0].evaluations == 40);
  CHECK(ra[0].searches[0].candidates.size() == 8);

  // Vanilla differs from improved only in the training mode.
  RunConfig cv = tiny_run(v);
  cv.mode = model::Mode::Vanilla;
  const auto rv = run_pipeline(cv);
  auto ja = nlohmann::json::parse(slurp(a / "seed-0" / "config.json"));
  auto jv = nlohmann::json::parse(slurp(v / "seed-0" / "config.json"));
  CHECK(ja["mode"] != jv["mode"]);
  ja.erase("mode");
  jv.erase("mode");
  ja.erase("out");
  jv.erase("out");
  CHECK(ja == jv);
  CHECK(slurp(a / "seed-0" / "data/Sphere8.jsonl") == slurp(v / "seed-0" / "data/Sphere8.jsonl"));

  // A training failure names the stage and leaves the datasets on disk.
  const fs::path f = scratch("run-fail");
  RunConfig cf = tiny_run(f);
  cf.model.max_len = 20;
  std::ostringstream log;
  try {
    run_pipeline(cf, &log);
    FAIL("expected a stage error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("stage train") != std::string::npos);
  }
  CHECK(fs::exists(f / "seed-0" / "data" / "Sphere8.jsonl"));
  CHECK(log.str().find("\"failed\"") != std::string::npos);

  // Separate stages reproduce the one-shot run.
  const auto suite = resolve_suite(ca);
  const auto ts = selected_tasks(ca, suite);
  const std::string dir = seed_dir(ca, 0);
  const auto ds = load_datasets(ts, dir);
  const auto models = load_models(ca, ts, dir);
  const fs::path s = scratch("run-stages");
  const auto searches = stage_search(ca, 0, models, ts, ds, 3, s.string());
  stage_eval(ca, ts, ds, searches, s.string());
  CHECK(slurp(s / "report.jsonl") == slurp(a / "seed-0" / "report.jsonl"));

  for (const auto& p : {a, b, v, f, s}) fs::remove_all(p);
}

TEST_CASE("single-task training writes one checkpoint per task") {
  const fs::path out = scratch("single");
  RunConfig c = tiny_run(out);
  c.multi_task = false;
  c.variant = model::Variant::N;
  c.optimizer = Optimizer::Cmaes;
  const auto r = run_pipeline(c);
  CHECK(fs::exists(out / "seed-0" / "model-Sphere8.ckpt"));
  CHECK(fs::exists(out / "seed-0" / "model-OneMax12.ckpt"));
  CHECK(r[0].report.method == "UniSO-N/improved/cmaes/single");
  // CMA-ES falls back to EA on the categorical task; budgets hold.
  for (const auto& sr : r[0].searches) CHECK(sr.evaluations == 40);
  fs::remove_all(out);
}
