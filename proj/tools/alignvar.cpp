// alignvar: dataset generation, training, inference, evaluation, probing and
// cost tables for the next-scale super-resolution model.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "alignvar/analysis.hpp"

namespace fs = std::filesystem;
using namespace avar;

namespace {

std::string schema_help() {
  std::ostringstream os;
  const TrainConfig defaults;
  os << "\nConfig keys (file lines `key = value`, or --set key=value):\n";
  for (const auto& k : config_schema()) {
    os << "  " << k.name << " = " << k.get(defaults) << "\n      " << k.help << "\n";
  }
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create directory " + dir.string());
}

std::vector<std::size_t> parse_scales(const std::string& text, std::size_t count) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    std::size_t pos = 0;
    long v = -1;
    try {
      v = std::stol(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || v < 1 || std::size_t(v) > count) {
      throw std::invalid_argument("scale '" + item + "' is not in 1.." + std::to_string(count));
    }
    out.push_back(std::size_t(v - 1));
  }
  if (out.empty()) throw std::invalid_argument("no scales given");
  return out;
}

std::vector<fs::path> inputs_of(const fs::path& p) {
  if (fs::is_directory(p)) {
    auto files = list_images(p);
    if (files.empty()) throw std::invalid_argument("no images in " + p.string());
    return files;
  }
  if (!fs::exists(p)) throw std::invalid_argument("input " + p.string() + " not found");
  return {p};
}

// Dataset the analysis verbs run on: the model's own data unless overridden.
struct DataChoice {
  std::string folder;
  std::optional<std::uint64_t> toy_seed;
  std::optional<std::size_t> toy_count;
};

void add_data_options(CLI::App* cmd, DataChoice& d) {
  cmd->add_option("--data", d.folder, "folder of HR images (default: the checkpoint's dataset)");
  cmd->add_option("--toy-seed", d.toy_seed, "generate toy HR images and degradations from this seed");
  cmd->add_option("--toy-count", d.toy_count, "number of generated toy images");
}

std::vector<Sample> samples_for(const AlignVar& model, const DataChoice& d, std::size_t threads) {
  TrainConfig cfg = model.config;
  if (!d.folder.empty()) cfg.dataset = d.folder;
  if (d.toy_seed) {
    cfg.dataset.clear();
    cfg.data_seed = *d.toy_seed;
  }
  if (d.toy_count) cfg.toy_count = *d.toy_count;
  AlignVar view;
  view.config = cfg;
  view.tokenizer = model.tokenizer;
  return prepare_samples(view, load_dataset(cfg), threads);
}

// ---- verbs -------------------------------------------------------------------

struct ToysetArgs {
  std::size_t n = 4, size = 64;
  std::optional<std::uint64_t> seed;
  std::string out, format = "png";
};

int run_make_toyset(const ToysetArgs& a) {
  ensure_dir(a.out);
  write_toyset(a.out, make_toyset(a.n, a.size, *a.seed), a.format);
  std::cout << "wrote " << a.n << " images to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, out;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_config(a.config);
  for (const auto& s : a.sets) apply_override(cfg, s);
  cfg.seed = *a.seed;
  cfg.validate();
  ensure_dir(a.out);
  write_text(fs::path(a.out) / "config.txt", config_text(cfg));
  Trainer trainer(cfg, load_dataset(cfg), a.threads);
  {
    std::ofstream metrics(fs::path(a.out) / "metrics.csv", std::ios::binary | std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write metrics.csv");
    trainer.run(&metrics, a.out);
  }
  save_checkpoint(fs::path(a.out) / "model.avar", trainer.model());
  std::vector<std::size_t> all(trainer.samples().size());
  std::iota(all.begin(), all.end(), 0);
  const LossBreakdown b = trainer.evaluate(all);
  std::printf("trained %llu steps on %zu images: ce %.6g hcc %.6g total %.6g\n",
              static_cast<unsigned long long>(trainer.model().step), trainer.samples().size(), b.ce, b.hcc, b.total);
  return 0;
}

struct InferArgs {
  std::string checkpoint, input, out;
  std::size_t top_k = 0;
  double temperature = 1.0;
  std::optional<std::uint64_t> seed;
};

int run_infer(const InferArgs& a) {
  if (a.top_k > 0 && !a.seed) throw std::invalid_argument("--seed is required with --top-k");
  const AlignVar model = load_checkpoint(a.checkpoint);
  ensure_dir(a.out);
  DecodeOptions opts;
  opts.top_k = a.top_k;
  opts.temperature = a.temperature;
  opts.seed = a.seed.value_or(0);
  for (const auto& path : inputs_of(a.input)) {
    const InferResult r = infer(model, read_image(path), opts);
    const std::string stem = path.stem().string();
    write_png(fs::path(a.out) / (stem + "_sr.png"), r.sr);
    write_text(fs::path(a.out) / (stem + "_tokens.csv"), tokens_csv(r.tokens));
    std::printf("%s -> %zux%zu\n", stem.c_str(), r.sr.height, r.sr.width);
    for (std::size_t k = 0; k < r.scale_ms.size(); ++k) {
      const Extent e = model.schedule()[k];
      std::printf("  scale %zu (%zux%zu): %.3f ms\n", k + 1, e.height, e.width, r.scale_ms[k]);
    }
  }
  return 0;
}

struct EvalArgs {
  bool edge_iou = false;
  std::string pred, gt, checkpoint, out;
  DataChoice data;
  std::size_t threads = 1;
};

int run_eval(const EvalArgs& a) {
  if (a.edge_iou) {
    if (a.pred.empty() || a.gt.empty()) throw std::invalid_argument("--edge-iou needs --pred and --gt folders");
    const auto pred = inputs_of(a.pred);
    std::ostringstream csv;
    csv << "image,edge_iou\n";
    double sum = 0.0;
    for (const auto& p : pred) {
      const fs::path g = fs::path(a.gt) / p.filename();
      if (!fs::exists(g)) throw std::invalid_argument("no ground truth for " + p.filename().string());
      const double v = edge_iou(read_image(p), read_image(g));
      sum += v;
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.9g", v);
      csv << p.filename().string() << ',' << buf << '\n';
    }
    if (!a.out.empty()) {
      ensure_dir(a.out);
      write_text(fs::path(a.out) / "edge_iou.csv", csv.str());
    }
    std::printf("edge IoU over %zu images: %.6f\n", pred.size(), sum / double(pred.size()));
    return 0;
  }
  if (a.checkpoint.empty()) throw std::invalid_argument("eval needs --checkpoint or --edge-iou");
  const AlignVar model = load_checkpoint(a.checkpoint);
  const auto samples = samples_for(model, a.data, a.threads);
  const ScaleErrorProfile prof = per_scale_mse(model, samples, a.threads);
  std::ostringstream csv;
  csv << "image,psnr,edge_iou";
  for (std::size_t k = 1; k <= model.schedule().size(); ++k) csv << ",acc_" << k;
  csv << '\n';
  double psnr_sum = 0.0;
  for (const auto& s : samples) {
    const InferResult r = infer(model, s.lr);
    const double p = psnr(r.sr, s.hr);
    psnr_sum += p;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g,%.9g", p, edge_iou(r.sr, s.hr));
    csv << s.name << ',' << buf;
    for (double v : token_accuracy(r.tokens, s.r_gt)) {
      std::snprintf(buf, sizeof buf, ",%.9g", v);
      csv << buf;
    }
    csv << '\n';
  }
  if (!a.out.empty()) {
    ensure_dir(a.out);
    write_text(fs::path(a.out) / "profile.csv", profile_csv(prof));
    write_text(fs::path(a.out) / "eval.csv", csv.str());
  }
  std::cout << profile_csv(prof);
  std::printf("mean PSNR over %zu images: %.4f dB\n", samples.size(), psnr_sum / double(samples.size()));
  return 0;
}

struct ProbeArgs {
  std::string checkpoint, out;
  bool attention = false, joint = false, pre_gate = false;
  std::string scales = "1,2,3";
  std::vector<double> sigmas{0.0, 0.25, 0.5};
  std::size_t repeats = 1, sample = 0, threads = 1;
  std::optional<std::uint64_t> seed;
  DataChoice data;
};

int run_probe(const ProbeArgs& a) {
  const AlignVar model = load_checkpoint(a.checkpoint);
  if (!a.out.empty()) ensure_dir(a.out);
  const auto samples = samples_for(model, a.data, a.threads);
  if (a.attention) {
    if (a.sample >= samples.size()) throw std::invalid_argument("--sample is outside the dataset");
    const ModelInput* view[] = {&samples[a.sample].input};
    AttentionRecord rec;
    model.predictor->forward(view, model.schedule().size(), &rec);
    const std::string csv = locality_csv(attention_locality(rec, model.schedule()));
    if (!a.out.empty()) write_text(fs::path(a.out) / "locality.csv", csv);
    std::cout << csv;
    return 0;
  }
  if (!a.seed) throw std::invalid_argument("--seed is required for perturbation probes");
  PerturbationOptions o;
  const auto scales = parse_scales(a.scales, model.schedule().size());
  for (std::size_t s : scales) o.targets.push_back({s});
  if (a.joint && scales.size() > 1) o.targets.push_back(scales);
  o.sigmas = a.sigmas;
  o.seed = *a.seed;
  o.repeats = a.repeats;
  o.pre_gate = a.pre_gate;
  std::vector<Image> lr;
  for (const auto& s : samples) lr.push_back(s.lr);
  const std::string csv = perturbation_csv(perturbation_probe(model, lr, o, a.threads));
  if (!a.out.empty()) write_text(fs::path(a.out) / "perturbation.csv", csv);
  std::cout << csv;
  return 0;
}

struct BenchArgs {
  std::uint64_t a = 2;
  std::size_t k = 3;
  bool empirical = false;
};

int run_bench(const BenchArgs& b) {
  const CostModel c = cost_model(b.a, b.k);
  std::cout << cost_csv(c);
  std::printf("total cost %llu\n", static_cast<unsigned long long>(c.total));
  if (b.k >= 4) {
    std::vector<std::size_t> ks;
    for (std::size_t k = 3; k <= b.k; ++k) ks.push_back(k);
    std::printf("log-log slope over K=3..%zu: %.4f\n", ks.back(), cost_slope(b.a, ks));
  }
  if (b.empirical) {
    std::vector<std::size_t> sides{1};
    for (std::size_t k = 1; k < b.k; ++k) sides.push_back(sides.back() * b.a);
    if (sides.back() > 32) throw std::invalid_argument("--empirical supports final sides up to 32");
    PredictorConfig pc;
    pc.depth = 1;
    pc.heads = 1;
    pc.width = 8;
    pc.vocab = 4;
    pc.embed_dim = 2;
    pc.mask_hidden = 2;
    pc.schedule = ScaleSchedule::square(sides);
    Rng rng(1);
    std::vector<double> entries(8);
    for (auto& v : entries) v = rng.normal();
    const Codebook cb(4, 2, entries);
    const Predictor<float> pred(pc, cb, rng);
    ModelInput in;
    in.cond = LatentMap(2, sides.back(), sides.back());
    for (std::size_t k = 0; k < sides.size(); ++k) {
      const std::size_t n = sides[k] * sides[k];
      in.guidance.push_back({sides[k], sides[k], std::vector<double>(n, 0.0), int(k)});
      in.context.push_back({sides[k], sides[k], std::vector<int>(n, 0), int(k)});
    }
    const auto emp = empirical_costs(pred, in);
    const bool same = emp == c.costs;
    std::printf("empirical attention pairs per step:");
    for (auto v : emp) std::printf(" %llu", static_cast<unsigned long long>(v));
    std::printf("\nempirical counter %s the analytic costs\n", same ? "matches" : "DIFFERS FROM");
    if (!same) return 1;
  }
  return 0;
}

struct GuidanceArgs {
  std::string input, out, schedule = "1,2,3,4,6,8";
};

int run_dump_guidance(const GuidanceArgs& a) {
  const ScaleSchedule sched = ScaleSchedule::parse(a.schedule);
  const auto maps = lr_guidance(read_image(a.input), sched);
  ensure_dir(a.out);
  std::ostringstream csv;
  csv << "scale,height,width,row,values\n";
  for (const auto& g : maps) {
    write_png(fs::path(a.out) / ("guidance_" + std::to_string(g.scale + 1) + ".png"), to_image(g));
    for (std::size_t y = 0; y < g.height; ++y) {
      csv << g.scale + 1 << ',' << g.height << ',' << g.width << ',' << y << ',';
      for (std::size_t x = 0; x < g.width; ++x) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%s%.9g", x ? " " : "", g.at(y, x));
        csv << buf;
      }
      csv << '\n';
    }
  }
  write_text(fs::path(a.out) / "guidance.csv", csv.str());
  std::cout << "wrote " << maps.size() << " guidance maps to " << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Next-scale residual autoregressive super-resolution on toy images."};
  app.require_subcommand(1);
  app.footer(schema_help());
  std::function<int()> action;

  ToysetArgs toy;
  auto* mk = app.add_subcommand("make-toyset", "write synthetic HR images and a manifest");
  mk->add_option("--n", toy.n, "number of images")->capture_default_str();
  mk->add_option("--size", toy.size, "image side in pixels")->capture_default_str();
  mk->add_option("--seed", toy.seed, "generator seed")->required();
  mk->add_option("--out", toy.out, "output folder")->required();
  mk->add_option("--format", toy.format, "png or pgm")->check(CLI::IsMember({"png", "pgm"}))->capture_default_str();
  mk->callback([&] { action = [&] { return run_make_toyset(toy); }; });

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "fit the tokenizer and train the predictor");
  train->add_option("--config", tr.config, "config file")->check(CLI::ExistingFile);
  train->add_option("--set", tr.sets, "override a config key: key=value (repeatable)");
  train->add_option("--seed", tr.seed, "training seed (sets train.seed)")->required();
  train->add_option("--out", tr.out, "output folder for metrics.csv, config.txt and checkpoints")->required();
  train->add_option("--threads", tr.threads, "worker threads for data preparation")->capture_default_str();
  train->footer(schema_help());
  train->callback([&] { action = [&] { return run_train(tr); }; });

  InferArgs inf;
  auto* infer_cmd = app.add_subcommand("infer", "super-resolve LR images scale by scale");
  infer_cmd->add_option("--checkpoint", inf.checkpoint, "model checkpoint")->required();
  infer_cmd->add_option("--input", inf.input, "LR image or folder")->required();
  infer_cmd->add_option("--out", inf.out, "output folder")->required();
  infer_cmd->add_option("--top-k", inf.top_k, "sample from the k most likely tokens (0: greedy)")->capture_default_str();
  infer_cmd->add_option("--temperature", inf.temperature, "sampling temperature")->capture_default_str();
  infer_cmd->add_option("--seed", inf.seed, "sampling seed (required with --top-k)");
  infer_cmd->callback([&] { action = [&] { return run_infer(inf); }; });

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "per-scale prediction error, PSNR and edge IoU");
  eval->add_flag("--edge-iou", ev.edge_iou, "compare same-named images of --pred and --gt by Canny edge IoU");
  eval->add_option("--pred", ev.pred, "predicted images folder");
  eval->add_option("--gt", ev.gt, "ground-truth images folder");
  eval->add_option("--checkpoint", ev.checkpoint, "model checkpoint");
  eval->add_option("--out", ev.out, "output folder for CSV reports");
  eval->add_option("--threads", ev.threads, "worker threads")->capture_default_str();
  add_data_options(eval, ev.data);
  eval->callback([&] { action = [&] { return run_eval(ev); }; });

  ProbeArgs pr;
  auto* probe = app.add_subcommand("probe", "perturbation injection or attention locality");
  probe->add_option("--checkpoint", pr.checkpoint, "model checkpoint")->required();
  probe->add_flag("--attention", pr.attention, "report mean attention distance per layer, head and scale");
  probe->add_option("--sample", pr.sample, "dataset item for --attention")->capture_default_str();
  probe->add_option("--scales", pr.scales, "1-based scales to perturb, comma separated")->capture_default_str();
  probe->add_option("--sigmas", pr.sigmas, "noise levels, in units of the codebook RMS")->delimiter(',')->capture_default_str();
  probe->add_flag("--joint", pr.joint, "also perturb all chosen scales at once");
  probe->add_flag("--pre-gate", pr.pre_gate, "inject before the gating mask instead of after");
  probe->add_option("--repeats", pr.repeats, "noise draws per image")->capture_default_str();
  probe->add_option("--seed", pr.seed, "noise seed (required for perturbation)");
  probe->add_option("--out", pr.out, "output folder for CSV reports");
  probe->add_option("--threads", pr.threads, "worker threads")->capture_default_str();
  add_data_options(probe, pr.data);
  probe->callback([&] { action = [&] { return run_probe(pr); }; });

  BenchArgs bn;
  auto* bench = app.add_subcommand("bench", "attention cost of a uniform-ratio schedule");
  bench->add_option("--a", bn.a, "side ratio between scales")->capture_default_str();
  bench->add_option("--k", bn.k, "number of scales")->capture_default_str();
  bench->add_flag("--empirical", bn.empirical, "count attention pairs in real forward passes");
  bench->callback([&] { action = [&] { return run_bench(bn); }; });

  GuidanceArgs gd;
  auto* dump = app.add_subcommand("dump-guidance", "write the Laplacian guidance pyramid of an LR image");
  dump->add_option("--input", gd.input, "LR image")->required();
  dump->add_option("--out", gd.out, "output folder")->required();
  dump->add_option("--schedule", gd.schedule, "scale sides")->capture_default_str();
  dump->callback([&] { action = [&] { return run_dump_guidance(gd); }; });

  if (argc > 1 && argv[1][0] != '-') {
    const std::string verb = argv[1];
    bool known = false;
    for (const auto* sub : app.get_subcommands({})) known = known || sub->get_name() == verb;
    if (!known) {
      std::cerr << "error: unknown verb '" << verb << "'\n" << app.help();
      return 2;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    return action ? action() : 1;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (auto& c : msg) {
      if (c == '\n') c = ' ';
    }
    std::cerr << "error: " << msg << "\n";
    return 1;
  }
}
