// xfsl: command-line driver for data generation, training, evaluation,
// attribution dumps, active learning, gradient checks and run reports.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "xfsl/active.hpp"
#include "xfsl/alignment.hpp"
#include "xfsl/attribution.hpp"
#include "xfsl/error.hpp"
#include "xfsl/gradcheck.hpp"
#include "xfsl/synthdata.hpp"
#include "xfsl/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace xfsl;

namespace {

struct Global {
  std::uint64_t seed = 0;
  std::string out;
};

struct TrainFlags {
  std::string mode = "guided";
  train::TrainConfig config;
  std::size_t embedding_dim = 64;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--mode", f.mode, "guided | baseline | random-cam")
      ->check(CLI::IsMember({"guided", "baseline", "random-cam"}))
      ->capture_default_str();
  cmd->add_option("--alpha", f.config.alpha, "explanation loss weight")->capture_default_str();
  cmd->add_option("--n-way", f.config.n_way)->capture_default_str();
  cmd->add_option("--k-shot", f.config.k_shot)->capture_default_str();
  cmd->add_option("--q-per-class", f.config.q_per_class)->capture_default_str();
  cmd->add_option("--epochs", f.config.epochs)->capture_default_str();
  cmd->add_option("--episodes", f.config.episodes_per_epoch, "episodes per epoch")
      ->capture_default_str();
  cmd->add_option("--lr", f.config.learning_rate)->capture_default_str();
  cmd->add_option("--beta1", f.config.adam_beta1)->capture_default_str();
  cmd->add_option("--beta2", f.config.adam_beta2)->capture_default_str();
  cmd->add_option("--adam-eps", f.config.adam_eps)->capture_default_str();
  cmd->add_option("--smoothing-eps", f.config.smoothing_eps, "soft Dice smoothing")
      ->capture_default_str();
  cmd->add_option("--embedding-dim", f.embedding_dim)->capture_default_str();
}

json train_config_json(const train::TrainConfig& c) {
  return json{{"mode", train::to_string(c.mode)},
              {"alpha", c.alpha},
              {"alpha_effective", c.effective_alpha()},
              {"n_way", c.n_way},
              {"k_shot", c.k_shot},
              {"q_per_class", c.q_per_class},
              {"epochs", c.epochs},
              {"episodes_per_epoch", c.episodes_per_epoch},
              {"learning_rate", c.learning_rate},
              {"adam_beta1", c.adam_beta1},
              {"adam_beta2", c.adam_beta2},
              {"adam_eps", c.adam_eps},
              {"smoothing_eps", c.smoothing_eps},
              {"seed", c.seed}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path prepare_out(const std::string& out) {
  if (out.empty()) throw ValidationError("--out is required");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw IoError("cannot create output directory " + out);
  return fs::path(out);
}

void write_run_config(const fs::path& out, const std::string& subcommand, const Global& g,
                      json params) {
  params["subcommand"] = subcommand;
  params["seed"] = g.seed;
  params["out"] = g.out;
  write_text(out / "run_config.json", params.dump(2) + "\n");
}

void summary(json j) { std::cout << j.dump() << std::endl; }

synth::Manifest open_data(const std::string& dir) {
  if (dir.empty()) throw ValidationError("--data is required");
  return synth::load_manifest(fs::path(dir) / "manifest.jsonl");
}

EncoderConfig encoder_config_for(const synth::Manifest& m, std::size_t embedding_dim,
                                 std::uint64_t seed) {
  if (m.entries.empty()) throw ValidationError("dataset " + m.root.string() + " is empty");
  const Sample first = synth::load_sample(m, m.entries.front());
  EncoderConfig c;
  c.channels = first.image.channels;
  c.height = first.image.height;
  c.width = first.image.width;
  c.embedding_dim = embedding_dim;
  c.seed = seed;
  c.validate();
  return c;
}

train::TrainConfig resolve(TrainFlags& f, const Global& g) {
  train::TrainConfig c = f.config;
  c.mode = train::mode_from_string(f.mode);
  c.seed = g.seed;
  c.validate();
  return c;
}

// Model settings recorded next to a checkpoint by `train`.
json model_info(const fs::path& checkpoint) {
  const fs::path cfg = checkpoint.parent_path() / "run_config.json";
  if (!fs::exists(cfg)) return json::object();
  try {
    const json j = json::parse(read_text(cfg));
    return json{{"mode", j.value("mode", "")},
                {"alpha", j.value("alpha_effective", 0.0)},
                {"seed", j.value("seed", 0)},
                {"embedding_dim", j.value("embedding_dim", 64)}};
  } catch (const json::exception&) {
    return json::object();
  }
}

void dump_heatmaps(const Encoder& encoder, std::span<const Sample> support_pool,
                   std::span<const Sample> samples, const train::TrainConfig& config,
                   attribution::Method method, std::size_t ig_steps, const fs::path& dir) {
  fs::create_directories(dir);
  const auto prototypes = train::support_prototypes(encoder, support_pool, config);
  for (const Sample& s : samples) {
    const auto probs = fewshot::classify_query(train::embed(encoder, s.image), prototypes);
    const auto heat =
        attribution::attribute(method, encoder, prototypes, s.image, fewshot::argmax(probs), ig_steps);
    attribution::dump_heatmap(heat, dir, s.id, method);
  }
}

int cmd_gen_data(const Global& g, synth::SynthConfig sc) {
  const fs::path out = prepare_out(g.out);
  sc.seed = g.seed;
  sc.validate();
  const auto manifest = synth::generate(sc, out);
  write_run_config(out, "gen-data", g,
                   json{{"n_classes", sc.n_classes},
                        {"per_class", sc.train_per_class},
                        {"test_per_class", sc.test_per_class},
                        {"confounded_test", sc.confounded_test},
                        {"image_size", sc.image_size},
                        {"channels", sc.channels},
                        {"radius_min", sc.radius_min},
                        {"radius_max", sc.radius_max},
                        {"noise_sigma", sc.noise_sigma},
                        {"lesion_contrast", sc.lesion_contrast},
                        {"tag_size", sc.tag_size},
                        {"tag_contrast", sc.tag_contrast},
                        {"spurious_rate", sc.spurious_rate},
                        {"deconfounded_rate", sc.deconfounded_rate}});
  summary({{"command", "gen-data"}, {"out", g.out}, {"samples", manifest.entries.size()}});
  return 0;
}

int cmd_train(const Global& g, TrainFlags& f, const std::string& data, const std::string& init,
              bool alpha_given) {
  train::TrainConfig c = resolve(f, g);
  if (c.mode == train::Mode::baseline && alpha_given && f.config.alpha != 0.0) {
    std::cerr << "warning: --alpha " << f.config.alpha
              << " is ignored in baseline mode (effective alpha 0)\n";
  }
  const auto manifest = open_data(data);
  const fs::path out = prepare_out(g.out);
  const auto pool = synth::load_split(manifest, synth::Split::train_pool);
  Encoder encoder(encoder_config_for(manifest, f.embedding_dim, g.seed));
  if (!init.empty()) encoder.load_checkpoint(init);
  json params = train_config_json(c);
  params["data"] = data;
  params["init"] = init;
  params["embedding_dim"] = f.embedding_dim;
  write_run_config(out, "train", g, params);
  const auto trace = train::train(encoder, pool, c);
  encoder.save_checkpoint(out / "checkpoint.bin");
  train::write_trace_csv(trace, out / "trace.csv");
  json s{{"command", "train"},
         {"mode", train::to_string(c.mode)},
         {"alpha_effective", c.effective_alpha()},
         {"checkpoint", (out / "checkpoint.bin").string()}};
  if (!trace.epochs.empty()) {
    s["l_proto"] = trace.epochs.back().l_proto;
    s["l_exp"] = trace.epochs.back().l_exp;
    s["l_total"] = trace.epochs.back().l_total;
  }
  summary(s);
  return 0;
}

int cmd_eval(const Global& g, TrainFlags& f, const std::string& data,
             const std::string& checkpoint, const std::string& split, bool heatmaps) {
  train::TrainConfig c = resolve(f, g);
  const auto manifest = open_data(data);
  if (checkpoint.empty()) throw ValidationError("--checkpoint is required");
  const json model = model_info(checkpoint);
  const std::size_t dim = model.value("embedding_dim", f.embedding_dim);
  Encoder encoder(encoder_config_for(manifest, dim, g.seed));
  encoder.load_checkpoint(checkpoint);
  const fs::path out = prepare_out(g.out);
  const auto support = synth::load_split(manifest, synth::Split::train_pool);
  const auto test = synth::load_split(manifest, synth::split_from_string(split));
  json params = train_config_json(c);
  params["data"] = data;
  params["checkpoint"] = checkpoint;
  params["split"] = split;
  params["model"] = model;
  params["dump_heatmaps"] = heatmaps;
  write_run_config(out, "eval", g, params);
  const auto report = train::evaluate(encoder, support, test, c);
  write_text(out / "report.json", train::report_to_json(report) + "\n");
  if (heatmaps) {
    dump_heatmaps(encoder, support, test, c, attribution::Method::gradcam, 64, out / "heatmaps");
  }
  summary({{"command", "eval"},
           {"split", split},
           {"accuracy", report.accuracy},
           {"macro_auc", report.macro_auc},
           {"iou", report.mean_cam_mask_iou}});
  return 0;
}

int cmd_explain(const Global& g, TrainFlags& f, const std::string& data,
                const std::string& checkpoint, const std::string& split,
                const std::string& method_name, std::size_t ig_steps, std::size_t limit,
                const std::string& target) {
  train::TrainConfig c = resolve(f, g);
  const auto method = attribution::method_from_string(method_name);
  if (ig_steps == 0) throw ValidationError("--ig-steps must be at least 1");
  const auto manifest = open_data(data);
  if (checkpoint.empty()) throw ValidationError("--checkpoint is required");
  const json model = model_info(checkpoint);
  Encoder encoder(encoder_config_for(manifest, model.value("embedding_dim", f.embedding_dim), g.seed));
  encoder.load_checkpoint(checkpoint);
  const fs::path out = prepare_out(g.out);
  const auto support = synth::load_split(manifest, synth::Split::train_pool);
  auto samples = synth::load_split(manifest, synth::split_from_string(split));
  if (limit > 0 && samples.size() > limit) samples.resize(limit);
  json params = train_config_json(c);
  params["data"] = data;
  params["checkpoint"] = checkpoint;
  params["split"] = split;
  params["method"] = attribution::to_string(method);
  params["ig_steps"] = ig_steps;
  params["limit"] = limit;
  params["target"] = target;
  write_run_config(out, "explain", g, params);

  const auto prototypes = train::support_prototypes(encoder, support, c);
  const fs::path dir = out / "heatmaps";
  fs::create_directories(dir);
  std::ofstream csv(out / "explain.csv", std::ios::trunc);
  csv << "id,label,predicted,target,dice,iou,degenerate\n";
  double dice_sum = 0.0;
  double iou_sum = 0.0;
  for (const Sample& s : samples) {
    const auto probs = fewshot::classify_query(train::embed(encoder, s.image), prototypes);
    const std::size_t pred = fewshot::argmax(probs);
    const std::size_t t = target == "true" ? s.label : pred;
    const auto heat = attribution::attribute(method, encoder, prototypes, s.image, t, ig_steps);
    attribution::dump_heatmap(heat, dir, s.id, method);
    const double dice = alignment::hard_dice(heat.values, s.mask, 0.5);
    const double iou = alignment::binary_iou(heat.values, s.mask, 0.5);
    dice_sum += dice;
    iou_sum += iou;
    csv << s.id << ',' << s.label << ',' << pred << ',' << t << ',' << dice << ',' << iou << ','
        << (heat.degenerate ? 1 : 0) << '\n';
  }
  if (!csv) throw IoError("write failed for explain.csv");
  const double n = samples.empty() ? 1.0 : static_cast<double>(samples.size());
  summary({{"command", "explain"},
           {"method", attribution::to_string(method)},
           {"samples", samples.size()},
           {"mean_dice", dice_sum / n},
           {"mean_iou", iou_sum / n}});
  return 0;
}

int cmd_active(const Global& g, TrainFlags& f, active::ALConfig al, const std::string& strategy,
               const std::string& data, const std::string& split, bool heatmaps) {
  train::TrainConfig c = resolve(f, g);
  al.strategy = active::strategy_from_string(strategy);
  al.seed = g.seed;
  al.validate();
  const auto manifest = open_data(data);
  const fs::path out = prepare_out(g.out);
  const auto pool = synth::load_split(manifest, synth::Split::train_pool);
  const auto test = synth::load_split(manifest, synth::split_from_string(split));
  const auto enc = encoder_config_for(manifest, f.embedding_dim, g.seed);
  json params = train_config_json(c);
  params["data"] = data;
  params["split"] = split;
  params["strategy"] = active::to_string(al.strategy);
  params["lambda"] = al.lambda;
  params["lambda_effective"] = al.effective_lambda();
  params["init_labeled"] = al.init_labeled;
  params["rounds"] = al.rounds;
  params["batch_k"] = al.batch_k;
  params["finetune_epochs"] = al.finetune_epochs;
  params["finetune_episodes"] = al.finetune_episodes;
  params["soft_dexp"] = al.soft_dexp;
  params["embedding_dim"] = f.embedding_dim;
  params["dump_heatmaps"] = heatmaps;
  write_run_config(out, "active", g, params);

  Encoder final_model(enc);
  const auto result = active::run_al(pool, test, al, c, enc, &final_model);
  active::write_audit_jsonl(result, out / "audit.jsonl");
  json rounds = json::array();
  for (std::size_t r = 0; r < result.reports.size(); ++r) {
    write_text(out / ("round_" + std::to_string(r) + ".json"),
               train::report_to_json(result.reports[r]) + "\n");
    rounds.push_back({{"round", r},
                      {"labeled", result.history[r].labeled_ids.size()},
                      {"accuracy", result.reports[r].accuracy},
                      {"iou", result.reports[r].mean_cam_mask_iou}});
  }
  json pools = json::array();
  for (const auto& p : result.history) {
    pools.push_back({{"round", p.round_index}, {"labeled", p.labeled_ids}});
  }
  write_text(out / "pool_history.json", pools.dump(2) + "\n");
  final_model.save_checkpoint(out / "checkpoint.bin");
  if (heatmaps) {
    std::vector<Sample> labeled;
    const auto& ids = result.history.back().labeled_ids;
    for (const Sample& s : pool) {
      if (std::binary_search(ids.begin(), ids.end(), s.id)) labeled.push_back(s);
    }
    dump_heatmaps(final_model, labeled, test, c, attribution::Method::gradcam, 64, out / "heatmaps");
  }
  summary({{"command", "active"},
           {"strategy", active::to_string(al.strategy)},
           {"final_accuracy", result.reports.back().accuracy},
           {"final_iou", result.reports.back().mean_cam_mask_iou},
           {"rounds", rounds}});
  return 0;
}

int cmd_gradcheck(const Global& g, std::size_t trials, double tolerance) {
  const auto results = gradcheck::run_all(trials, g.seed, tolerance);
  std::ostringstream table;
  table << "case,trials,failures,kinks_skipped,worst_rel_error,status\n";
  std::size_t failed = 0;
  for (const auto& r : results) {
    table << r.name << ',' << r.trials << ',' << r.failures << ',' << r.kinks_skipped << ','
          << r.worst_error << ','
          << (r.passed() ? "pass" : "FAIL") << '\n';
    if (!r.passed()) ++failed;
  }
  std::cerr << table.str();
  if (!g.out.empty()) {
    const fs::path out = prepare_out(g.out);
    write_run_config(out, "gradcheck", g, json{{"trials", trials}, {"tolerance", tolerance}});
    write_text(out / "gradcheck.csv", table.str());
  }
  summary({{"command", "gradcheck"},
           {"cases", results.size()},
           {"failed", failed},
           {"passed", failed == 0}});
  return failed == 0 ? 0 : 3;
}

struct RunRow {
  std::string run;
  std::string kind;   // eval | active | train
  std::string group;  // mode or strategy
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double macro_auc = 0.0;
  double iou = 0.0;
};

RunRow read_run(const fs::path& dir) {
  const fs::path cfg_path = dir / "run_config.json";
  if (!fs::exists(cfg_path)) throw ValidationError("report: " + dir.string() + " has no run_config.json");
  json cfg;
  try {
    cfg = json::parse(read_text(cfg_path));
  } catch (const json::exception& e) {
    throw ParseError(cfg_path.string() + ": " + e.what(), 0);
  }
  RunRow row;
  row.run = dir.filename().string().empty() ? dir.parent_path().filename().string()
                                            : dir.filename().string();
  row.kind = cfg.value("subcommand", "");
  row.seed = cfg.value("seed", std::uint64_t{0});
  train::EvalReport rep;
  if (row.kind == "eval") {
    const json model = cfg.value("model", json::object());
    row.group = model.value("mode", std::string("unknown"));
    rep = train::report_from_json(read_text(dir / "report.json"));
  } else if (row.kind == "active") {
    row.group = cfg.value("strategy", std::string("unknown"));
    std::size_t last = 0;
    while (fs::exists(dir / ("round_" + std::to_string(last + 1) + ".json"))) ++last;
    rep = train::report_from_json(read_text(dir / ("round_" + std::to_string(last) + ".json")));
  } else {
    throw ValidationError("report: run " + dir.string() + " is a '" + row.kind +
                          "' run; expected eval or active");
  }
  row.accuracy = rep.accuracy;
  row.macro_auc = rep.macro_auc;
  row.iou = rep.mean_cam_mask_iou;
  return row;
}

int cmd_report(const Global& g, const std::vector<std::string>& runs) {
  if (runs.empty()) throw ValidationError("report: no run directories given");
  std::vector<RunRow> rows;
  for (const auto& r : runs) rows.push_back(read_run(r));
  const fs::path out = prepare_out(g.out);
  write_run_config(out, "report", g, json{{"runs", runs}});

  std::ostringstream csv;
  csv << "run,kind,group,seed,accuracy,macro_auc,iou\n";
  for (const auto& r : rows) {
    csv << r.run << ',' << r.kind << ',' << r.group << ',' << r.seed << ',' << r.accuracy << ','
        << r.macro_auc << ',' << r.iou << '\n';
  }
  write_text(out / "report.csv", csv.str());

  struct Agg {
    std::size_t n = 0;
    double acc = 0.0, auc = 0.0, iou = 0.0;
  };
  std::map<std::pair<std::string, std::string>, Agg> groups;
  for (const auto& r : rows) {
    Agg& a = groups[{r.kind, r.group}];
    ++a.n;
    a.acc += r.accuracy;
    a.auc += r.macro_auc;
    a.iou += r.iou;
  }
  std::ostringstream text;
  char line[160];
  std::snprintf(line, sizeof line, "%-8s %-12s %4s %10s %10s %10s\n", "kind", "group", "n",
                "accuracy", "macro_auc", "iou");
  text << line;
  json table = json::array();
  for (const auto& [key, a] : groups) {
    const double n = static_cast<double>(a.n);
    std::snprintf(line, sizeof line, "%-8s %-12s %4zu %10.4f %10.4f %10.4f\n", key.first.c_str(),
                  key.second.c_str(), a.n, a.acc / n, a.auc / n, a.iou / n);
    text << line;
    table.push_back({{"kind", key.first},
                     {"group", key.second},
                     {"n", a.n},
                     {"accuracy", a.acc / n},
                     {"macro_auc", a.auc / n},
                     {"iou", a.iou / n}});
  }
  write_text(out / "report.txt", text.str());
  std::cerr << text.str();
  summary({{"command", "report"}, {"runs", rows.size()}, {"groups", table}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xfsl: explanation-guided few-shot learning and active learning toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Global global;
  app.add_option("--seed", global.seed, "seed for all randomness")->capture_default_str();
  app.add_option("--out", global.out, "output directory");

  synth::SynthConfig sc;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic lesion benchmark");
  gen->add_option("--per-class", sc.train_per_class, "train pool samples per class")
      ->capture_default_str();
  gen->add_option("--test-per-class", sc.test_per_class)->capture_default_str();
  gen->add_option("--image-size", sc.image_size)->capture_default_str();
  gen->add_option("--channels", sc.channels)->capture_default_str();
  gen->add_option("--radius-min", sc.radius_min)->capture_default_str();
  gen->add_option("--radius-max", sc.radius_max)->capture_default_str();
  gen->add_option("--noise-sigma", sc.noise_sigma)->capture_default_str();
  gen->add_option("--lesion-contrast", sc.lesion_contrast)->capture_default_str();
  gen->add_option("--tag-contrast", sc.tag_contrast)->capture_default_str();
  gen->add_option("--spurious-rate", sc.spurious_rate)->capture_default_str();
  bool no_confounded = false;
  gen->add_flag("--no-confounded-test", no_confounded, "skip the confounded test split");

  TrainFlags tf;
  std::string data;
  std::string init;
  auto* tr = app.add_subcommand("train", "episodic training; writes checkpoint.bin and trace.csv");
  add_train_flags(tr, tf);
  tr->add_option("--data", data, "dataset directory")->required();
  tr->add_option("--init", init, "checkpoint to start from");

  TrainFlags ef;
  std::string checkpoint;
  std::string split = "test_deconfounded";
  bool heatmaps = false;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint; writes report.json");
  add_train_flags(ev, ef);
  ev->add_option("--data", data)->required();
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--split", split)->capture_default_str();
  ev->add_flag("--dump-heatmaps", heatmaps, "write Grad-CAM PGMs for every test sample");

  TrainFlags xf;
  std::string method = "gradcam";
  std::size_t ig_steps = 64;
  std::size_t limit = 0;
  std::string target = "predicted";
  auto* ex = app.add_subcommand("explain", "heatmap PGMs plus per-sample Dice/IoU CSV");
  add_train_flags(ex, xf);
  ex->add_option("--data", data)->required();
  ex->add_option("--checkpoint", checkpoint)->required();
  ex->add_option("--split", split)->capture_default_str();
  ex->add_option("--method", method, "gradcam | ig")
      ->check(CLI::IsMember({"gradcam", "ig"}))
      ->capture_default_str();
  ex->add_option("--ig-steps", ig_steps)->capture_default_str();
  ex->add_option("--limit", limit, "first N samples only (0 = all)")->capture_default_str();
  ex->add_option("--target", target, "predicted | true")
      ->check(CLI::IsMember({"predicted", "true"}))
      ->capture_default_str();

  TrainFlags af;
  active::ALConfig al;
  std::string strategy = "xgal";
  auto* ac = app.add_subcommand("active", "explainability-guided active learning");
  add_train_flags(ac, af);
  ac->add_option("--data", data)->required();
  ac->add_option("--split", split, "evaluation split")->capture_default_str();
  ac->add_option("--strategy", strategy, "xgal | random | entropy | dice")
      ->check(CLI::IsMember({"xgal", "random", "entropy", "dice"}))
      ->capture_default_str();
  ac->add_option("--lambda", al.lambda)->capture_default_str();
  ac->add_option("--init-labeled", al.init_labeled)->capture_default_str();
  ac->add_option("--rounds", al.rounds)->capture_default_str();
  ac->add_option("--batch-k", al.batch_k)->capture_default_str();
  ac->add_option("--finetune-epochs", al.finetune_epochs)->capture_default_str();
  ac->add_option("--finetune-episodes", al.finetune_episodes)->capture_default_str();
  ac->add_flag("--soft-dexp", al.soft_dexp, "score misalignment with the smoothed Dice loss");
  ac->add_flag("--dump-heatmaps", heatmaps, "write final-model Grad-CAM PGMs");

  std::size_t trials = 20;
  double tolerance = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suites");
  gc->add_option("--trials", trials)->capture_default_str();
  gc->add_option("--tolerance", tolerance, "max relative error")->capture_default_str();

  std::vector<std::string> runs;
  auto* rp = app.add_subcommand("report", "aggregate eval/active run directories");
  rp->add_option("runs", runs, "run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      sc.confounded_test = !no_confounded;
      return cmd_gen_data(global, sc);
    }
    if (*tr) return cmd_train(global, tf, data, init, tr->count("--alpha") > 0);
    if (*ev) return cmd_eval(global, ef, data, checkpoint, split, heatmaps);
    if (*ex) return cmd_explain(global, xf, data, checkpoint, split, method, ig_steps, limit, target);
    if (*ac) return cmd_active(global, af, al, strategy, data, split, heatmaps);
    if (*gc) return cmd_gradcheck(global, trials, tolerance);
    if (*rp) return cmd_report(global, runs);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
