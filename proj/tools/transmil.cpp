#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "transmil/transmil.hpp"

namespace fs = std::filesystem;
using namespace transmil;

namespace {

constexpr int kOk = 0;
constexpr int kPropertyFailure = 1;
constexpr int kUsage = 2;

/// Echo every option of the chosen subcommand (including defaults) so a run can be reproduced.
void print_settings(const CLI::App& sub) {
  std::cerr << "# " << sub.get_name() << " settings\n" << sub.config_to_str(true, false);
}

struct GenArgs {
  std::string preset = "camelyon-like";
  std::string out;
  // Shown as defaults; only flags given explicitly override the preset.
  std::size_t bags = SyntheticConfig{}.bag_count;
  std::size_t min_instances = SyntheticConfig{}.min_instances, max_instances = SyntheticConfig{}.max_instances;
  std::size_t feature_dim = SyntheticConfig{}.feature_dim, classes = SyntheticConfig{}.class_count;
  double witness_rate = SyntheticConfig{}.witness_rate, separation = SyntheticConfig{}.cluster_separation;
  bool clustered = SyntheticConfig{}.spatial_clustering;
  std::uint64_t seed = SyntheticConfig{}.seed;
  std::uint64_t split_seed = 7;
};

int cmd_gen(const GenArgs& a, const CLI::App& sub) {
  SyntheticConfig cfg;
  if (a.preset == "camelyon-like")
    cfg = SyntheticConfig::camelyon_like();
  else if (a.preset == "tcga-like")
    cfg = SyntheticConfig::tcga_like();
  else
    throw ParameterError("preset must be camelyon-like or tcga-like, got '" + a.preset + "'");

  // Explicit flags override the preset; untouched flags keep the preset value.
  auto given = [&](const char* name) { return sub.count(name) > 0; };
  cfg.bag_count = a.bags;
  cfg.seed = a.seed;
  if (given("--min-instances")) cfg.min_instances = a.min_instances;
  if (given("--max-instances")) cfg.max_instances = a.max_instances;
  if (given("--feature-dim")) cfg.feature_dim = a.feature_dim;
  if (given("--classes")) cfg.class_count = a.classes;
  if (given("--witness-rate")) cfg.witness_rate = a.witness_rate;
  if (given("--separation")) cfg.cluster_separation = a.separation;
  if (given("--spatial-clustering")) cfg.spatial_clustering = a.clustered;
  cfg.validate();

  const SyntheticDataset ds = generate_synthetic_dataset(cfg);
  fs::create_directories(a.out);
  const Manifest manifest = split_dataset(write_dataset(ds.bags, a.out), {0.6, 0.15, 0.25}, a.split_seed);
  write_manifest(manifest, (fs::path(a.out) / "manifest.csv").string());

  std::cout << "bags=" << manifest.records.size() << " train=" << manifest.in_split(Split::train).size()
            << " val=" << manifest.in_split(Split::val).size() << " test=" << manifest.in_split(Split::test).size()
            << "\n";
  return kOk;
}

Manifest load_manifest_from(const std::string& dir) {
  const fs::path path = fs::path(dir) / "manifest.csv";
  if (!fs::exists(path)) throw std::runtime_error("no manifest at '" + path.string() + "'");
  return read_manifest(path.string());
}

std::size_t class_count_of(const Manifest& m) {
  int top = 1;
  for (const auto& r : m.records) top = std::max(top, r.label);
  return static_cast<std::size_t>(top) + 1;
}

struct TrainArgs {
  std::string data, out;
  std::size_t epochs = 50, dim = 512, heads = 8, landmarks = 64, lookahead_k = 5;
  double lr = 2e-4, wd = 1e-5, lookahead_alpha = 0.5;
  std::string mode = "nystrom";
  std::uint64_t seed = 1;
};

int cmd_train(const TrainArgs& a) {
  const Manifest manifest = load_manifest_from(a.data);
  const auto train = load_split(manifest, a.data, Split::train);
  const auto val = load_split(manifest, a.data, Split::val);
  if (train.empty() || val.empty()) throw ParameterError("manifest needs non-empty train and val splits");

  ModelConfig mc;
  mc.input_dim = train.front().dim();
  mc.msa.model_dim = a.dim;
  mc.msa.heads = a.heads;
  mc.msa.landmarks = a.landmarks;
  mc.classes = class_count_of(manifest);
  TransMILModel model = TransMILModel::create(mc, a.seed);

  TrainConfig tc;
  tc.learning_rate = a.lr;
  tc.weight_decay = a.wd;
  tc.epochs = a.epochs;
  tc.lookahead_k = a.lookahead_k;
  tc.lookahead_alpha = a.lookahead_alpha;
  tc.mode = parse_attention_mode(a.mode);
  tc.seed = a.seed;

  std::cerr << "train: " << train.size() << " bags, val: " << val.size() << " bags, "
            << model.parameter_count() << " parameters\n";
  const EvalReport report = train_loop(train, val, model, tc, mc.classes, [](const EpochRecord& e) {
    std::cerr << "epoch " << e.epoch << " loss=" << e.train_loss << " val_auc=" << e.val_auc
              << " val_acc=" << e.val_acc << " (" << e.seconds << " s)\n";
  });

  fs::create_directories(a.out);
  save_checkpoint(model, (fs::path(a.out) / "model.tmil").string());
  write_training_log(report.history, (fs::path(a.out) / "log.csv").string());
  std::cout << "best_epoch=" << report.best_epoch << " val_auc=" << report.auc << "\n";
  return kOk;
}

struct EvalArgs {
  std::string data, ckpt, split = "test", mode = "nystrom", report;
};

int cmd_eval(const EvalArgs& a) {
  const Manifest manifest = load_manifest_from(a.data);
  if (!fs::exists(a.ckpt)) throw std::runtime_error("no checkpoint at '" + a.ckpt + "'");
  const TransMILModel model = load_checkpoint(a.ckpt);
  const Split split = parse_split(a.split);
  const auto bags = load_split(manifest, a.data, split);
  if (bags.empty()) throw ParameterError("split '" + a.split + "' has no bags");
  for (const auto& b : bags)
    if (b.dim() != model.config.input_dim)
      throw DimensionError("bag '" + b.id + "' has feature dim " + std::to_string(b.dim()) +
                           " but the checkpoint expects " + std::to_string(model.config.input_dim));

  const EvalReport r = evaluate(bags, model, ForwardOptions{parse_attention_mode(a.mode), PositionEncoding::ppeg},
                                model.config.classes);
  std::cout << "accuracy=" << r.accuracy << " auc=" << r.auc << "\n";

  nlohmann::json j;
  j["split"] = a.split;
  j["bags"] = bags.size();
  j["mode"] = a.mode;
  j["accuracy"] = r.accuracy;
  j["auc"] = r.auc;
  j["per_class_auc"] = r.per_class_auc;
  j["mean_loss"] = r.mean_loss;
  const std::string path =
      a.report.empty() ? (fs::path(a.ckpt).parent_path() / "eval.json").string() : a.report;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
  return kOk;
}

struct AttendArgs {
  std::string ckpt, bag, out, mode = "nystrom";
};

int cmd_attend(const AttendArgs& a) {
  if (!fs::exists(a.ckpt)) throw std::runtime_error("no checkpoint at '" + a.ckpt + "'");
  if (!fs::exists(a.bag)) throw std::runtime_error("no bag file at '" + a.bag + "'");
  const TransMILModel model = load_checkpoint(a.ckpt);
  const Bag bag = read_bag(a.bag);
  if (bag.dim() != model.config.input_dim)
    throw DimensionError("bag has feature dim " + std::to_string(bag.dim()) + " but the checkpoint expects " +
                         std::to_string(model.config.input_dim));

  const TPTOutput o = tpt_forward(bag.instances, model, ForwardOptions{parse_attention_mode(a.mode)});
  const Heatmap map = export_heatmap(o.class_attention, o.original_n, o.grid);
  const fs::path dir = a.out.empty() ? fs::path(a.bag).parent_path() : fs::path(a.out);
  if (!dir.empty()) fs::create_directories(dir);
  const std::string stem = fs::path(a.bag).stem().string();
  write_heatmap_csv(map, (dir / (stem + ".heatmap.csv")).string());
  write_heatmap_pgm(map, (dir / (stem + ".pgm")).string());
  std::cout << "instances=" << bag.size() << " grid=" << map.grid << "\n";
  return kOk;
}

int cmd_bench(const BenchConfig& cfg, const std::string& out) {
  const BenchReport report = run_attention_bench(cfg);
  write_bench_csv(report, out);
  for (const auto& row : report.rows)
    std::cerr << "n=" << row.n << " " << to_string(row.mode) << " " << row.millis << " ms, peak buffer "
              << row.peak_elements << " elements\n";
  std::cout << "exact_growth=" << report.growth(AttentionMode::exact)
            << " nystrom_growth=" << report.growth(AttentionMode::nystrom) << "\n";
  return kOk;
}

int cmd_entropy_check(std::size_t trials, const std::vector<std::size_t>& variables, std::uint64_t seed) {
  const EntropySweepReport r = run_entropy_sweep(trials, variables, seed);
  std::cout << "tables=" << r.tables_checked << " products=" << r.product_tables_checked
            << " max_excess=" << r.max_inequality_excess << " max_chain_gap=" << r.max_chain_gap
            << " max_product_gap=" << r.max_product_gap << "\n";
  for (const auto& v : r.violations) std::cout << v << "\n";
  return r.passed() ? kOk : kPropertyFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer multiple-instance learning toolkit"};
  app.require_subcommand(1, 1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic bag dataset with a train/val/test manifest");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--preset", gen.preset, "camelyon-like or tcga-like")->capture_default_str();
  gen_cmd->add_option("--bags", gen.bags, "Number of bags")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  gen_cmd->add_option("--split-seed", gen.split_seed, "Seed of the 60:15:25 patient split")->capture_default_str();
  gen_cmd->add_option("--min-instances", gen.min_instances)->capture_default_str();
  gen_cmd->add_option("--max-instances", gen.max_instances)->capture_default_str();
  gen_cmd->add_option("--feature-dim", gen.feature_dim)->capture_default_str();
  gen_cmd->add_option("--classes", gen.classes)->capture_default_str();
  gen_cmd->add_option("--witness-rate", gen.witness_rate)->capture_default_str();
  gen_cmd->add_option("--separation", gen.separation)->capture_default_str();
  gen_cmd->add_option("--spatial-clustering", gen.clustered)->capture_default_str();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a model on the train split, selecting by validation AUC");
  train_cmd->add_option("--data", train.data, "Dataset directory containing manifest.csv")->required();
  train_cmd->add_option("--out", train.out, "Directory for model.tmil and log.csv")->required();
  train_cmd->add_option("--epochs", train.epochs)->capture_default_str();
  train_cmd->add_option("--seed", train.seed)->capture_default_str();
  train_cmd->add_option("--lr", train.lr)->capture_default_str();
  train_cmd->add_option("--wd", train.wd)->capture_default_str();
  train_cmd->add_option("--mode", train.mode, "nystrom or exact")->capture_default_str();
  train_cmd->add_option("--landmarks", train.landmarks)->capture_default_str();
  train_cmd->add_option("--heads", train.heads)->capture_default_str();
  train_cmd->add_option("--dim", train.dim)->capture_default_str();
  train_cmd->add_option("--lookahead-k", train.lookahead_k)->capture_default_str();
  train_cmd->add_option("--lookahead-alpha", train.lookahead_alpha)->capture_default_str();

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  eval_cmd->add_option("--data", eval.data)->required();
  eval_cmd->add_option("--ckpt", eval.ckpt)->required();
  eval_cmd->add_option("--split", eval.split)->capture_default_str();
  eval_cmd->add_option("--mode", eval.mode)->capture_default_str();
  eval_cmd->add_option("--report", eval.report, "JSON report path (default: eval.json beside the checkpoint)");

  AttendArgs attend;
  auto* attend_cmd = app.add_subcommand("attend", "Export the class-token attention heatmap of one bag");
  attend_cmd->add_option("--ckpt", attend.ckpt)->required();
  attend_cmd->add_option("--bag", attend.bag)->required();
  attend_cmd->add_option("--out", attend.out, "Output directory (default: beside the bag)");
  attend_cmd->add_option("--mode", attend.mode)->capture_default_str();

  BenchConfig bench;
  std::string bench_out = "bench.csv";
  auto* bench_cmd = app.add_subcommand("bench", "Time exact and Nystrom attention over sequence lengths");
  bench_cmd->add_option("--lengths", bench.lengths)->capture_default_str()->delimiter(',');
  bench_cmd->add_option("--dim", bench.dim)->capture_default_str();
  bench_cmd->add_option("--landmarks", bench.landmarks)->capture_default_str();
  bench_cmd->add_option("--repeats", bench.repeats)->capture_default_str();
  bench_cmd->add_option("--seed", bench.seed)->capture_default_str();
  bench_cmd->add_option("--out", bench_out)->capture_default_str();

  std::size_t trials = 1000;
  std::vector<std::size_t> variables{2, 3, 4};
  std::uint64_t entropy_seed = 0;
  auto* entropy_cmd = app.add_subcommand("entropy-check", "Check the pooling entropy inequality on random joints");
  entropy_cmd->add_option("--trials", trials)->capture_default_str();
  entropy_cmd->add_option("--variables", variables)->capture_default_str()->delimiter(',');
  entropy_cmd->add_option("--seed", entropy_seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    for (const auto* sub : app.get_subcommands()) print_settings(*sub);
    if (*gen_cmd) return cmd_gen(gen, *gen_cmd);
    if (*train_cmd) return cmd_train(train);
    if (*eval_cmd) return cmd_eval(eval);
    if (*attend_cmd) return cmd_attend(attend);
    if (*bench_cmd) {
      bench.validate();
      return cmd_bench(bench, bench_out);
    }
    if (*entropy_cmd) return cmd_entropy_check(trials, variables, entropy_seed);
  } catch (const UndefinedMetricError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kPropertyFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
