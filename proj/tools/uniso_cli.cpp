#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "uniso/error.hpp"
#include "uniso/harness.hpp"

namespace fs = std::filesystem;
using namespace uniso;
using harness::RunConfig;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string variant, mode, optimizer, out;
  std::optional<std::size_t> budget;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "run config (JSON)");
  app->add_option("--seed", c.seed, "single run seed");
  app->add_option("--variant", c.variant, "model variant")->check(CLI::IsMember({"t", "n"}));
  app->add_option("--mode", c.mode, "training mode")->check(CLI::IsMember({"vanilla", "improved"}));
  app->add_option("--optimizer", c.optimizer, "search optimizer")->check(CLI::IsMember({"ea", "cmaes", "bo"}));
  app->add_option("--budget", c.budget, "model evaluations per task");
  app->add_option("--out", c.out, "output directory");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? harness::default_run_config() : harness::load_run_config(c.config);
  if (const char* env = std::getenv("UNISO_SEED"); env && *env) cfg.seeds = {std::stoull(env)};
  if (c.seed) cfg.seeds = {*c.seed};
  if (!c.variant.empty()) cfg.variant = model::parse_variant(c.variant);
  if (!c.mode.empty()) cfg.mode = model::parse_mode(c.mode);
  if (!c.optimizer.empty()) cfg.optimizer = harness::parse_optimizer(c.optimizer);
  if (c.budget) cfg.budget = *c.budget;
  if (!c.out.empty()) cfg.out_dir = c.out;
  cfg.validate();
  const auto suite = harness::resolve_suite(cfg);
  cfg.sig_digits = suite.sig_digits;
  return cfg;
}

struct Context {
  RunConfig cfg;
  tasks::SuiteConfig suite;
  std::vector<tasks::TaskSpec> tasks;
};

Context context(const Common& c) {
  Context ctx;
  ctx.cfg = resolve(c);
  ctx.suite = harness::resolve_suite(ctx.cfg);
  ctx.tasks = harness::selected_tasks(ctx.cfg, ctx.suite);
  return ctx;
}

std::ofstream out_file(const std::string& path) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  return os;
}

const tasks::TaskSpec& heldout_task(const tasks::SuiteConfig& suite, const std::string& id) {
  if (suite.heldout.empty()) throw DomainError("suite has no held-out tasks");
  if (id.empty()) return suite.heldout.front();
  for (const auto& t : suite.heldout)
    if (t.id == id) return t;
  throw DomainError("unknown held-out task " + id);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"uniso: string-based offline black-box optimization"};
  app.require_subcommand(1);
  std::map<std::string, Common> common;
  auto sub = [&](const char* name, const char* help) {
    CLI::App* s = app.add_subcommand(name, help);
    add_common(s, common[name]);
    return s;
  };

  auto* gen = sub("gen-data", "generate offline datasets");
  auto* train = sub("train", "train a model on generated datasets");
  auto* search = sub("search", "search each task with the trained model");
  auto* eval = sub("eval", "score final candidates with the oracles");
  auto* run = sub("run", "gen-data, train, search and eval in one go");
  auto* finetune = sub("finetune", "zero-shot and few-shot runs on a held-out task");
  std::string heldout_id;
  std::size_t ft_epochs = 5, ft_pairs = 100;
  double ft_lr = 2e-5;
  finetune->add_option("--task", heldout_id, "held-out task id (default: first)");
  finetune->add_option("--epochs", ft_epochs, "fine-tuning epochs");
  finetune->add_option("--lr", ft_lr, "fine-tuning learning rate");
  finetune->add_option("--pairs", ft_pairs, "size of the poorest-pairs set");
  auto* emb = sub("export-embeddings", "write pooled and projected embeddings as TSV");
  auto* att = sub("export-attention", "write per-task attention shares as TSV");
  std::size_t att_max = 64;
  att->add_option("--per-task", att_max, "designs per task");
  auto* report = sub("report", "rank methods from report.jsonl files");
  std::vector<std::string> report_files;
  report->add_option("reports", report_files, "report.jsonl files")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (report->parsed()) {
      std::map<std::string, harness::EvalReport> reports;
      for (const auto& f : report_files) {
        std::ifstream is(f);
        if (!is) throw Error("cannot open " + f);
        auto r = harness::read_report_jsonl(is);
        const std::string key = reports.count(r.method) ? r.method + " (" + f + ")" : r.method;
        reports[key] = std::move(r);
      }
      const auto table = harness::report_ranks(reports);
      harness::write_rank_table(std::cout, table);
      const std::string out = common["report"].out;
      if (!out.empty()) {
        auto os = out_file((fs::path(out) / "ranks.txt").string());
        harness::write_rank_table(os, table);
        auto js = out_file((fs::path(out) / "ranks.jsonl").string());
        for (std::size_t m = 0; m < table.methods.size(); ++m) {
          js << nlohmann::json{{"method", table.methods[m]},
                               {"tasks", table.tasks},
                               {"ranks", table.ranks[m]},
                               {"mean", table.mean[m]},
                               {"std", table.stddev[m]}}
                    .dump()
             << '\n';
        }
      }
      return 0;
    }

    for (auto& [name, opts] : common) {
      CLI::App* s = app.get_subcommand(name);
      if (!s->parsed()) continue;
      const Context ctx = context(opts);
      const auto& cfg = ctx.cfg;
      const int sig = cfg.sig_digits;
      for (std::uint64_t seed : cfg.seeds) {
        const std::string dir = harness::seed_dir(cfg, seed);
        std::cerr << name << ": seed " << seed << " -> " << dir << '\n';
        if (s == run) {
          RunConfig one = cfg;
          one.seeds = {seed};
          const auto arts = harness::run_pipeline(one, &std::cerr);
          harness::write_report_table(std::cout, arts.front().report);
        } else if (s == gen) {
          harness::stage_gen_data(cfg, seed, ctx.tasks, sig, dir);
        } else if (s == train) {
          harness::stage_train(cfg, seed, ctx.tasks, harness::load_datasets(ctx.tasks, dir), sig, dir, &std::cerr);
        } else if (s == search) {
          harness::stage_search(cfg, seed, harness::load_models(cfg, ctx.tasks, dir), ctx.tasks,
                                harness::load_datasets(ctx.tasks, dir), sig, dir);
        } else if (s == eval) {
          const auto r = harness::stage_eval(cfg, ctx.tasks, harness::load_datasets(ctx.tasks, dir),
                                             harness::load_searches(ctx.tasks, dir), dir);
          harness::write_report_table(std::cout, r);
        } else if (s == finetune) {
          if (!cfg.multi_task) throw DomainError("finetune needs a multi-task checkpoint");
          const auto& task = heldout_task(ctx.suite, heldout_id);
          const std::size_t n = std::max<std::size_t>(cfg.dataset_size ? cfg.dataset_size : task.dataset_size, ft_pairs);
          const auto full = tasks::gen_offline_dataset(task, n, task.protocol, harness::dataset_seed(task, seed), sig);
          const auto few = full.poorest(ft_pairs);
          const auto models = harness::load_models(cfg, ctx.tasks, dir);
          const auto r = harness::run_transfer(models.front(), task, few, cfg, seed, ft_epochs, ft_lr);
          auto os = out_file((fs::path(dir) / ("transfer-" + task.id + ".jsonl")).string());
          for (const auto& [label, m] : {std::pair{"zero-shot", r.zero_shot}, std::pair{"few-shot", r.few_shot}}) {
            const nlohmann::json j{{"task", task.id},   {"setting", label},   {"dataset_best", r.dataset_best},
                                   {"best", m.best},    {"median", m.median}, {"normalized_best", m.normalized_best},
                                   {"exceeds", m.exceeds}};
            os << j.dump() << '\n';
            std::cout << j.dump() << '\n';
          }
        } else if (s == emb) {
          const auto models = harness::load_models(cfg, ctx.tasks, dir);
          if (models.size() != 1) throw DomainError("export-embeddings needs a multi-task checkpoint");
          auto os = out_file((fs::path(dir) / "embeddings.tsv").string());
          harness::export_embeddings(os, models.front(), ctx.tasks, harness::load_datasets(ctx.tasks, dir), sig);
        } else if (s == att) {
          const auto models = harness::load_models(cfg, ctx.tasks, dir);
          if (models.size() != 1) throw DomainError("export-attention needs a multi-task checkpoint");
          const auto rows =
              harness::attention_rows(models.front(), ctx.tasks, harness::load_datasets(ctx.tasks, dir), sig, att_max);
          auto os = out_file((fs::path(dir) / "attention.tsv").string());
          harness::export_attention(os, rows);
        }
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
