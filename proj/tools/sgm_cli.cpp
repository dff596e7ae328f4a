// sgm: synthetic data, instance extraction, matching, registration,
// training and evaluation from the command line.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sgm/sgm.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Common {
  std::string config, checkpoint, output = ".", manifest;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
};

sgm::AppConfig load_config(const Common& c) {
  sgm::AppConfig cfg = c.config.empty() ? sgm::AppConfig{} : sgm::read_config(c.config);
  if (c.seed) cfg.set_seed(*c.seed);
  if (c.threads < 1) throw sgm::ValidationError("--threads must be >= 1");
  cfg.eval.threads = c.threads;
  return cfg;
}

fs::path output_dir(const Common& c) {
  fs::path dir(c.output);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw sgm::IoError("cannot create " + dir.string() + ": " + ec.message());
  return dir;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw sgm::IoError("cannot open " + p.string() + " for writing");
  return out;
}

sgm::Model load_model(const Common& c, const sgm::AppConfig& cfg) {
  if (c.checkpoint.empty()) throw sgm::ValidationError("--checkpoint is required");
  sgm::Model model(cfg.model);
  sgm::apply_checkpoint(model.parameters(), sgm::load_checkpoint(c.checkpoint));
  return model;
}

int cmd_synth(const Common& c) {
  const auto cfg = load_config(c);
  const fs::path dir = output_dir(c);
  const auto pairs = sgm::generate_scene_pairs(cfg.gen, cfg.categories, sgm::SceneStream::test, cfg.synth_pairs);
  auto manifest = open_out(dir / "manifest.txt");
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const std::string stem = "pair" + std::to_string(k);
    const auto& p = pairs[k];
    sgm::write_scan(dir / (stem + "_x.bin"), p.x.cloud);
    sgm::write_labels(dir / (stem + "_x.label"), p.x.labels);
    sgm::write_scan(dir / (stem + "_y.bin"), p.y.cloud);
    sgm::write_labels(dir / (stem + "_y.label"), p.y.labels);
    auto gt = open_out(dir / (stem + "_gt.txt"));
    sgm::write_transform(gt, p.gt);
    manifest << "pair " << stem << "_x.bin " << stem << "_x.label " << stem << "_y.bin " << stem << "_y.label " << stem
             << "_gt.txt\n";
  }
  std::cout << pairs.size() << " pairs written to " << dir.string() << '\n';
  return 0;
}

int cmd_extract(const Common& c, const std::string& scan, const std::string& labels) {
  const auto cfg = load_config(c);
  const auto cloud = sgm::read_semantic_scan(scan, labels);
  sgm::ExtractionDiagnostics diag;
  const auto inst = sgm::extract_instances(cloud, cfg.categories, cfg.model.shape_points, &diag);
  auto out = open_out(output_dir(c) / "instances.txt");
  out.precision(10);
  // id category cx cy cz points
  for (const auto& i : inst) {
    out << i.id << ' ' << cfg.categories.categories[i.category_index].name << ' ' << i.centroid.x() << ' '
        << i.centroid.y() << ' ' << i.centroid.z() << ' ' << i.point_count << '\n';
  }
  std::cout << inst.size() << " instances; " << diag.unknown_label_points << " unknown-label points, "
            << diag.discarded_clusters << " clusters below min_points\n";
  return 0;
}

struct PairFiles {
  std::string xs, xl, ys, yl;
};

int cmd_match(const Common& c, const PairFiles& f) {
  const auto cfg = load_config(c);
  const auto model = load_model(c, cfg);
  const auto x = sgm::read_semantic_scan(f.xs, f.xl);
  const auto y = sgm::read_semantic_scan(f.ys, f.yl);
  const auto ix = sgm::extract_instances(x, cfg.categories, cfg.model.shape_points);
  const auto iy = sgm::extract_instances(y, cfg.categories, cfg.model.shape_points);
  if (ix.empty() || iy.empty()) throw sgm::ValidationError("match: a scene has no instances");
  sgm::NoGradGuard no_grad;
  const auto sx = sgm::make_scene_tensors(ix, sgm::build_graph(ix, cfg.registration.graph_k), cfg.model);
  const auto sy = sgm::make_scene_tensors(iy, sgm::build_graph(iy, cfg.registration.graph_k), cfg.model);
  const auto fwd = sgm::forward_match(model, sx, sy, cfg.registration.sinkhorn);
  const auto corr = sgm::hard_assign(fwd.assignment.trimmed(), cfg.registration.threshold);
  auto out = open_out(output_dir(c) / "correspondences.txt");
  sgm::write_correspondences(out, corr);
  std::cout << corr.size() << " correspondences (" << ix.size() << " x " << iy.size() << " instances)\n";
  return 0;
}

int cmd_register(const Common& c, const PairFiles& f) {
  const auto cfg = load_config(c);
  const auto model = load_model(c, cfg);
  const auto x = sgm::read_semantic_scan(f.xs, f.xl);
  const auto y = sgm::read_semantic_scan(f.ys, f.yl);
  const auto r = sgm::register_pair(model, x, y, cfg.categories, cfg.registration);
  const fs::path dir = output_dir(c);
  auto t = open_out(dir / "transform.txt");
  sgm::write_transform(t, r.estimate());
  const auto& d = r.diagnostics;
  auto diag = open_out(dir / "diagnostics.txt");
  diag << "instances_x " << d.instances_x << "\ninstances_y " << d.instances_y << "\ncorrespondences "
       << d.correspondences << "\ncoarse_inliers " << d.coarse_inliers << "\nsinkhorn_iterations " << d.sinkhorn_iterations << "\nicp_converged "
       << d.icp_converged << "\nicp_iterations " << d.icp_iterations << "\ncoarse_rms " << d.coarse_rms
       << "\nfine_rms " << d.fine_rms << "\nskipped " << d.skipped << '\n';
  if (d.skipped) {
    diag << "reason " << d.reason << '\n';
    std::cerr << "registration skipped: " << d.reason << " (identity written)\n";
  }
  return 0;
}

std::vector<sgm::ScenePair> prepare_all(const std::vector<sgm::GeneratedPair>& gen, const sgm::AppConfig& cfg) {
  std::vector<sgm::ScenePair> out;
  out.reserve(gen.size());
  for (const auto& g : gen) {
    out.push_back(sgm::prepare_pair(g.x, g.y, g.gt, cfg.categories, cfg.model,
                                    {cfg.train.graph_k, cfg.train.beta}));
    out.back().seed = g.seed;
  }
  return out;
}

int cmd_train(const Common& c) {
  const auto cfg = load_config(c);
  const fs::path dir = output_dir(c);
  const fs::path ckpt = c.checkpoint.empty() ? dir / "model.sgm" : fs::path(c.checkpoint);
  const auto train_set =
      prepare_all(sgm::generate_scene_pairs(cfg.gen, cfg.categories, sgm::SceneStream::train, cfg.train_pairs), cfg);
  const auto val_set =
      prepare_all(sgm::generate_scene_pairs(cfg.gen, cfg.categories, sgm::SceneStream::validation, cfg.val_pairs), cfg);
  if (train_set.empty()) throw sgm::ValidationError("no pairs");

  sgm::Model model(cfg.model);
  auto history = open_out(dir / "history.jsonl");
  sgm::train(model, train_set, val_set, cfg.train, [&](const sgm::EpochRecord& r) {
    const json rec{{"epoch", r.epoch}, {"mean_loss", r.mean_loss}, {"val_ip", r.val_ip}, {"val_ir", r.val_ir},
                   {"learning_rate", r.learning_rate}};
    history << rec.dump() << '\n' << std::flush;
    std::cout << "epoch " << r.epoch << " loss " << r.mean_loss << " val IP " << r.val_ip << " val IR " << r.val_ir
              << '\n';
  });
  sgm::save_checkpoint(model.parameters(), ckpt);
  std::cout << "checkpoint written to " << ckpt.string() << '\n';
  return 0;
}

json stats_json(const sgm::Stats& s) {
  return {{"mean", s.mean}, {"stddev", s.stddev}, {"median", s.median}, {"count", s.count}};
}

int cmd_eval(const Common& c) {
  const auto cfg = load_config(c);
  std::vector<sgm::EvalInput> data;
  if (!c.manifest.empty()) {
    data = sgm::load_manifest_pairs(sgm::read_manifest(c.manifest), cfg.extrinsic);
  } else {
    const auto gen = sgm::generate_scene_pairs(cfg.gen, cfg.categories, sgm::SceneStream::test, cfg.eval_pairs);
    for (std::size_t k = 0; k < gen.size(); ++k) data.push_back({gen[k].x, gen[k].y, gen[k].gt, "synth" + std::to_string(k)});
  }
  if (data.empty()) throw sgm::ValidationError("no pairs");
  const auto model = load_model(c, cfg);
  const auto rep = sgm::evaluate(model, data, cfg.categories, cfg.eval);

  const fs::path dir = output_dir(c);
  auto pairs = open_out(dir / "pairs.txt");
  sgm::write_pair_reports(pairs, rep);
  auto summary = open_out(dir / "summary.txt");
  sgm::write_summary(summary, rep);
  const json j{{"pairs", rep.pairs.size()},
               {"skipped", rep.skipped},
               {"rr", rep.rr.defined ? json(rep.rr.value) : json(nullptr)},
               {"rre", stats_json(rep.rre)},
               {"rte", stats_json(rep.rte)},
               {"ip", rep.ip_defined ? json(rep.ip) : json(nullptr)},
               {"ir", rep.ir_defined ? json(rep.ir) : json(nullptr)}};
  auto js = open_out(dir / "summary.json");
  js << j.dump(2) << '\n';
  sgm::write_summary(std::cout, rep);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  sgm::tune_allocator();
  CLI::App app{"Semantic graph matching for LiDAR registration"};
  app.require_subcommand(1);
  app.fallthrough();
  Common c;
  app.add_option("--config", c.config, "key=value configuration file");
  app.add_option("--checkpoint", c.checkpoint, "model checkpoint (read, or written by train)");
  app.add_option("--seed", c.seed, "seed for model init, data generation and shuffling");
  app.add_option("--output", c.output, "output directory")->capture_default_str();
  app.add_option("--threads", c.threads, "evaluation worker threads")->capture_default_str();

  PairFiles pf;
  std::string scan, labels;
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset and manifest");
  auto* extract = app.add_subcommand("extract", "scan + labels -> instance list");
  extract->add_option("scan", scan)->required();
  extract->add_option("labels", labels)->required();
  const auto pair_args = [&](CLI::App* sub) {
    sub->add_option("x_scan", pf.xs)->required();
    sub->add_option("x_labels", pf.xl)->required();
    sub->add_option("y_scan", pf.ys)->required();
    sub->add_option("y_labels", pf.yl)->required();
  };
  auto* match = app.add_subcommand("match", "pair -> instance correspondences");
  pair_args(match);
  auto* reg = app.add_subcommand("register", "pair -> rigid transform and diagnostics");
  pair_args(reg);
  auto* train = app.add_subcommand("train", "train on synthetic pairs");
  auto* eval = app.add_subcommand("eval", "evaluate on a manifest or synthetic pairs");
  eval->add_option("--manifest", c.manifest, "dataset manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    if (*synth) return cmd_synth(c);
    if (*extract) return cmd_extract(c, scan, labels);
    if (*match) return cmd_match(c, pf);
    if (*reg) return cmd_register(c, pf);
    if (*train) return cmd_train(c);
    if (*eval) return cmd_eval(c);
  } catch (const sgm::IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
