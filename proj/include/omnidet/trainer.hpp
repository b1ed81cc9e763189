#pragma once

#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "omnidet/daa.hpp"
#include "omnidet/data.hpp"
#include "omnidet/detector.hpp"
#include "omnidet/distill.hpp"
#include "omnidet/evaluation.hpp"
#include "omnidet/gpa.hpp"

namespace omnidet::trainer {

// ---------------------------------------------------------------------------
// Config serialization: one visitor drives the JSON form, the flat key=value
// config file, CLI overrides, and the checkpoint mismatch check.
// ---------------------------------------------------------------------------

template <class F>
void visit_config(Config& c, F&& f) {
  f("num_classes", c.num_classes);
  f("image_size", c.image_size);
  f("beta", c.beta);
  f("delta", c.delta);
  f("lambda", c.lambda);
  f("alpha", c.alpha);
  f("epsilon", c.epsilon);
  f("gamma", c.gamma);
  f("w_focal", c.w_focal);
  f("w_reg", c.w_reg);
  f("w_bce", c.w_bce);
  f("w_intra", c.w_intra);
  f("w_inter", c.w_inter);
  f("w_sfl", c.w_sfl);
  f("aug_noise", c.aug_noise);
  f("lr", c.lr);
  f("lr_floor", c.lr_floor);
  f("adam_beta1", c.adam_beta1);
  f("adam_beta2", c.adam_beta2);
  f("adam_eps", c.adam_eps);
  f("patience", c.patience);
  f("stagnation_eps", c.stagnation_eps);
  f("n_full", c.n_full);
  f("n_weak", c.n_weak);
  f("n_unlabeled", c.n_unlabeled);
  f("steps", c.steps);
  f("eval_every", c.eval_every);
  f("pyramid_levels", c.pyramid_levels);
  f("feature_dim", c.feature_dim);
  f("anchors_per_cell", c.anchors_per_cell);
  f("anchor_base", c.anchor_base);
  f("seed", c.seed);
}

inline nlohmann::json config_to_json(const Config& cfg) {
  nlohmann::json j;
  visit_config(const_cast<Config&>(cfg), [&](const char* k, auto& v) { j[k] = v; });
  return j;
}

inline Config config_from_json(const nlohmann::json& j) {
  Config cfg;
  visit_config(cfg, [&](const char* k, auto& v) {
    if (j.contains(k)) v = j.at(k).get<std::decay_t<decltype(v)>>();
  });
  return cfg;
}

// Flat `key = value` text, '#' comments.
inline Config parse_config_file(const std::string& path, Config base = {}) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  std::string line;
  std::map<std::string, std::string> kv;
  while (std::getline(f, line)) {
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
      return s;
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  std::map<std::string, bool> known;
  visit_config(base, [&](const char* k, auto& v) {
    known[k] = true;
    auto it = kv.find(k);
    if (it == kv.end()) return;
    std::istringstream is(it->second);
    is >> v;
    if (is.fail()) throw std::runtime_error(std::string("bad config value for ") + k);
  });
  for (const auto& [k, _] : kv)
    if (!known.count(k)) throw std::runtime_error("unknown config key: " + k);
  return base;
}

// Applies a single "key=value" override (CLI flags route through this).
inline void apply_override(Config& cfg, const std::string& key, const std::string& value) {
  bool found = false;
  visit_config(cfg, [&](const char* k, auto& v) {
    if (key != k) return;
    std::istringstream is(value);
    is >> v;
    if (is.fail()) throw std::runtime_error("bad value for config key " + key);
    found = true;
  });
  if (!found) throw std::runtime_error("unknown config key: " + key);
}

// ---------------------------------------------------------------------------

struct LossReport {
  long long step = 0;
  double lr = 0;
  double focal = 0, reg = 0, bce = 0, intra = 0, inter = 0, sfl = 0, total = 0;

  static const char* csv_header() {
    return "step,lr,focal,reg,bce,intra,inter,sfl,total";
  }
  std::string csv_row() const {
    std::ostringstream os;
    os.precision(17);
    os << step << "," << lr << "," << focal << "," << reg << "," << bce << "," << intra
       << "," << inter << "," << sfl << "," << total;
    return os.str();
  }
};

struct TrainState {
  Config cfg;
  Detector student;
  distill::Teacher teacher;
  gpa::PrototypeBank bank;
  AnchorSet anchors;
  std::vector<Tensor> adam_m, adam_v;
  long long adam_t = 0;
  double lr = 0;
  long long step = 0;
  double best_map = 0;
  int evals_since_improve = 0;

  explicit TrainState(const Config& config)
      : cfg(config),
        student(make_student(config)),
        teacher(config),
        bank(config.num_classes, config.feature_dim),
        anchors(build_anchors(config.image_size, config.image_size,
                              config.pyramid_levels, config.anchors_per_cell,
                              config.anchor_base)),
        lr(config.lr) {
    teacher.initialize_from(student);
    for (const Var& p : student.parameters()) {
      adam_m.emplace_back(p->val.shape);
      adam_v.emplace_back(p->val.shape);
    }
  }

 private:
  static Detector make_student(const Config& config) {
    std::mt19937_64 rng(data::mix_seed(config.seed, 0x696e6974ULL));
    return Detector(config, rng);
  }
};

inline void zero_gradients(TrainState& state) {
  for (const Var& p : state.student.parameters())
    std::fill(p->grad.v.begin(), p->grad.v.end(), 0.0);
}

inline void adam_step(TrainState& s) {
  const Config& c = s.cfg;
  ++s.adam_t;
  double bc1 = 1.0 - std::pow(c.adam_beta1, static_cast<double>(s.adam_t));
  double bc2 = 1.0 - std::pow(c.adam_beta2, static_cast<double>(s.adam_t));
  auto& params = s.student.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i]->val;
    const Tensor& g = params[i]->grad;
    for (std::size_t j = 0; j < p.size(); ++j) {
      double gj = g[j];
      s.adam_m[i][j] = c.adam_beta1 * s.adam_m[i][j] + (1 - c.adam_beta1) * gj;
      s.adam_v[i][j] = c.adam_beta2 * s.adam_v[i][j] + (1 - c.adam_beta2) * gj * gj;
      double mhat = s.adam_m[i][j] / bc1;
      double vhat = s.adam_v[i][j] / bc2;
      p[j] -= s.lr * mhat / (std::sqrt(vhat) + c.adam_eps);
    }
  }
}

// One omni-supervised step. Loss routing: focal+reg on FULL; BCE/intra/inter
// on FULL and WEAK; soft focal distillation on WEAK and UNLABELED. Components
// with no qualifying sample contribute 0.
inline LossReport train_step(TrainState& state, const std::vector<Sample>& batch) {
  const Config& cfg = state.cfg;
  zero_gradients(state);

  Var zero = constant(Tensor::scalar(0.0));
  Var focal_sum = zero, reg_sum = zero, bce_sum = zero, intra_sum = zero,
      inter_sum = zero, sfl_sum = zero;
  int n_full = 0, n_labeled = 0, n_distill = 0;
  std::vector<gpa::CategoryFeature> bank_batch;

  for (const Sample& sample : batch) {
    PyramidOutputs out = state.student.forward(sample.image);

    if (sample.granularity == Granularity::FULL) {
      AnchorTargets targets = assign_targets(sample.boxes, state.anchors);
      focal_sum = add(focal_sum, focal_loss(out.cls_probs, targets, cfg.num_classes,
                                            cfg.anchors_per_cell, cfg.alpha, cfg.gamma));
      reg_sum = add(reg_sum, smooth_l1_loss(out.reg_maps, targets, cfg.anchors_per_cell));
      ++n_full;
    }

    if (sample.granularity != Granularity::UNLABELED) {
      daa::AttentionPair attn = daa::compute_attention(
          out, state.student.global_head_weight(), cfg.num_classes, cfg.anchors_per_cell);
      bce_sum = add(bce_sum, daa::weak_loss(attn.predictions, sample));
      std::vector<std::pair<int, Var>> feats;
      for (int c = 0; c < cfg.num_classes; ++c) {
        if (!sample.image_labels[c]) continue;
        Var f = gpa::aggregate_features(out.backbone_feature, attn.local[c]);
        feats.emplace_back(c, f);
        bank_batch.push_back({c, f->val.v, attn.predictions[c]->val[0]});
      }
      if (!feats.empty()) {
        intra_sum = add(intra_sum, gpa::intra_loss(feats, state.bank));
        inter_sum = add(inter_sum, gpa::inter_loss(feats, state.bank, cfg.delta));
      }
      ++n_labeled;
    }

    if (sample.granularity != Granularity::FULL) {
      const Tensor& teacher_in =
          sample.teacher_view.size() ? sample.teacher_view : sample.image;
      std::vector<Tensor> teacher_cls = state.teacher.predict_cls(teacher_in);
      sfl_sum = add(sfl_sum, distill::soft_focal_loss(out.cls_probs, teacher_cls,
                                                      cfg.alpha, cfg.epsilon, cfg.gamma,
                                                      cfg.anchors_per_cell));
      ++n_distill;
    }
  }

  auto mean = [](const Var& sum, int n) {
    return n > 0 ? scale(sum, 1.0 / n) : constant(Tensor::scalar(0.0));
  };
  Var focal = mean(focal_sum, n_full), reg = mean(reg_sum, n_full);
  Var bce = mean(bce_sum, n_labeled), intra = mean(intra_sum, n_labeled),
      inter = mean(inter_sum, n_labeled);
  Var sfl = mean(sfl_sum, n_distill);

  Var total = add(add(add(scale(focal, cfg.w_focal), scale(reg, cfg.w_reg)),
                      add(scale(bce, cfg.w_bce), scale(intra, cfg.w_intra))),
                  add(scale(inter, cfg.w_inter), scale(sfl, cfg.w_sfl)));
  backward(total);
  adam_step(state);
  state.teacher.ema_update_from(state.student, cfg.lambda);
  gpa::update_prototypes(state.bank, bank_batch);
  ++state.step;

  LossReport report;
  report.step = state.step;
  report.lr = state.lr;
  report.focal = focal->val[0];
  report.reg = reg->val[0];
  report.bce = bce->val[0];
  report.intra = intra->val[0];
  report.inter = inter->val[0];
  report.sfl = sfl->val[0];
  report.total = total->val[0];
  return report;
}

// Divide lr by 10 after `patience` evaluations without a >= stagnation_eps
// improvement of the best validation mAP; floored at lr_floor.
inline void lr_schedule(TrainState& state, double val_map) {
  if (val_map >= state.best_map + state.cfg.stagnation_eps) {
    state.best_map = val_map;
    state.evals_since_improve = 0;
    return;
  }
  state.best_map = std::max(state.best_map, val_map);
  if (++state.evals_since_improve >= state.cfg.patience) {
    state.lr = std::max(state.lr / 10.0, state.cfg.lr_floor);
    state.evals_since_improve = 0;
  }
}

// ---------------------------------------------------------------------------
// Inference and split evaluation
// ---------------------------------------------------------------------------

inline std::vector<Detection> infer(const Detector& model, const AnchorSet& anchors,
                                    const Tensor& image, double score_thresh = 0.05,
                                    double iou_thresh = 0.5, int max_dets = 50) {
  const Config& cfg = model.config();
  int native_h = image.shape[0], native_w = image.shape[1];
  Tensor resized = bilinear_resize2d(image, cfg.image_size, cfg.image_size);
  PyramidOutputs out = model.forward(resized);
  std::vector<Detection> dets =
      decode_and_nms(out, anchors, cfg.num_classes, score_thresh, iou_thresh, max_dets,
                     cfg.image_size, cfg.image_size);
  double sx = static_cast<double>(native_w) / cfg.image_size;
  double sy = static_cast<double>(native_h) / cfg.image_size;
  for (auto& d : dets) {
    d.x_min *= sx;
    d.x_max *= sx;
    d.y_min *= sy;
    d.y_max *= sy;
  }
  return dets;
}

struct LoadedSplit {
  data::DatasetManifest manifest;
  std::vector<Sample> samples;  // aligned with manifest.records
};

inline LoadedSplit load_split(const std::string& dir) {
  LoadedSplit split;
  split.manifest = data::load_manifest(dir);
  split.samples.reserve(split.manifest.records.size());
  for (const auto& rec : split.manifest.records)
    split.samples.push_back(data::load_sample(dir, rec));
  return split;
}

// Scores a model against a split. Ground truth comes from the evaluation
// gate so WEAK/UNLABELED splits are scored against their hidden boxes.
inline eval::EvalResult evaluate_split(const Detector& model, const AnchorSet& anchors,
                                       const LoadedSplit& split, const std::string& dir,
                                       double score_thresh = 0.05) {
  auto gt_by_id = eval::load_eval_ground_truth(dir);
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<GroundTruthBox>> gts;
  for (std::size_t i = 0; i < split.samples.size(); ++i) {
    dets.push_back(infer(model, anchors, split.samples[i].image, score_thresh));
    gts.push_back(gt_by_id.at(split.samples[i].id));
  }
  return eval::evaluate(dets, gts, split.manifest.num_classes);
}

// ---------------------------------------------------------------------------
// Checkpointing: raw doubles plus a config snapshot; byte-exact round trip.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_tensor(std::ostream& os, const Tensor& t) {
  std::uint64_t n = t.size();
  os.write(reinterpret_cast<const char*>(&n), sizeof n);
  os.write(reinterpret_cast<const char*>(t.v.data()), static_cast<std::streamsize>(n * sizeof(double)));
}

inline void read_tensor(std::istream& is, Tensor& t) {
  std::uint64_t n = 0;
  is.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!is || n != t.size()) throw std::runtime_error("checkpoint: tensor size mismatch");
  is.read(reinterpret_cast<char*>(t.v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw std::runtime_error("checkpoint: truncated tensor data");
}

}  // namespace detail

inline void save_checkpoint(const TrainState& state, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  os.write("OMNICKP1", 8);
  std::string cfg_json = config_to_json(state.cfg).dump();
  std::uint64_t len = cfg_json.size();
  os.write(reinterpret_cast<const char*>(&len), sizeof len);
  os.write(cfg_json.data(), static_cast<std::streamsize>(len));
  os.write(reinterpret_cast<const char*>(&state.step), sizeof state.step);
  os.write(reinterpret_cast<const char*>(&state.adam_t), sizeof state.adam_t);
  os.write(reinterpret_cast<const char*>(&state.lr), sizeof state.lr);
  os.write(reinterpret_cast<const char*>(&state.best_map), sizeof state.best_map);
  os.write(reinterpret_cast<const char*>(&state.evals_since_improve),
           sizeof state.evals_since_improve);
  for (const Var& p : state.student.parameters()) detail::write_tensor(os, p->val);
  for (const Var& p : state.teacher.model().parameters()) detail::write_tensor(os, p->val);
  for (const Tensor& t : state.adam_m) detail::write_tensor(os, t);
  for (const Tensor& t : state.adam_v) detail::write_tensor(os, t);
  detail::write_tensor(os, state.bank.prototypes);
  os.write(reinterpret_cast<const char*>(&state.bank.step), sizeof state.bank.step);
  os.write(reinterpret_cast<const char*>(&state.bank.beta), sizeof state.bank.beta);
  os.write(reinterpret_cast<const char*>(state.bank.initialized.data()),
           static_cast<std::streamsize>(state.bank.initialized.size()));
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

// Loads into a fresh TrainState. The stored config must match `expected`
// field by field; a mismatch error names the offending field.
inline TrainState load_checkpoint(const std::string& path, const Config& expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != "OMNICKP1")
    throw std::runtime_error("not a checkpoint file: " + path);
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string cfg_json(len, '\0');
  is.read(cfg_json.data(), static_cast<std::streamsize>(len));
  if (!is) throw std::runtime_error("corrupt checkpoint header: " + path);
  nlohmann::json saved = nlohmann::json::parse(cfg_json);
  nlohmann::json expect = config_to_json(expected);
  for (const auto& [k, v] : expect.items())
    if (saved.at(k) != v)
      throw std::runtime_error("checkpoint config mismatch in field '" + k +
                               "': saved " + saved.at(k).dump() + ", expected " + v.dump());

  TrainState state(expected);
  is.read(reinterpret_cast<char*>(&state.step), sizeof state.step);
  is.read(reinterpret_cast<char*>(&state.adam_t), sizeof state.adam_t);
  is.read(reinterpret_cast<char*>(&state.lr), sizeof state.lr);
  is.read(reinterpret_cast<char*>(&state.best_map), sizeof state.best_map);
  is.read(reinterpret_cast<char*>(&state.evals_since_improve),
          sizeof state.evals_since_improve);
  for (const Var& p : state.student.parameters()) detail::read_tensor(is, p->val);
  for (const Var& p : state.teacher.model().parameters()) detail::read_tensor(is, p->val);
  for (Tensor& t : state.adam_m) detail::read_tensor(is, t);
  for (Tensor& t : state.adam_v) detail::read_tensor(is, t);
  detail::read_tensor(is, state.bank.prototypes);
  is.read(reinterpret_cast<char*>(&state.bank.step), sizeof state.bank.step);
  is.read(reinterpret_cast<char*>(&state.bank.beta), sizeof state.bank.beta);
  is.read(reinterpret_cast<char*>(state.bank.initialized.data()),
          static_cast<std::streamsize>(state.bank.initialized.size()));
  if (!is) throw std::runtime_error("truncated checkpoint: " + path);
  return state;
}

// ---------------------------------------------------------------------------
// Training loop: deterministic batch composition and augmentation derived
// from (seed, step), periodic validation driving the lr schedule.
// ---------------------------------------------------------------------------

struct EvalPoint {
  long long step = 0;
  double map = 0;
};

struct TrainRunResult {
  std::vector<LossReport> reports;
  std::vector<EvalPoint> evals;
  double final_map = 0;
};

inline TrainRunResult run_training(TrainState& state, const LoadedSplit& train,
                                   const std::string& train_dir,
                                   const LoadedSplit* val, const std::string& val_dir,
                                   long long steps, std::ostream* log = nullptr,
                                   std::ostream* progress = nullptr) {
  const Config& cfg = state.cfg;
  data::BatchSpec spec{cfg.n_full, cfg.n_weak, cfg.n_unlabeled};
  (void)train_dir;
  TrainRunResult result;
  if (log && state.step == 0) *log << LossReport::csv_header() << ",val_map\n";
  long long end_step = state.step + steps;
  while (state.step < end_step) {
    std::vector<int> idx = data::compose_batch(train.manifest, spec, cfg.seed, state.step);
    std::mt19937_64 aug_rng(data::mix_seed(cfg.seed, 0xa6a6ULL + static_cast<std::uint64_t>(state.step)));
    std::vector<Sample> batch;
    for (int i : idx)
      batch.push_back(data::augment(train.samples[i],
                                    data::draw_augment_params(aug_rng, cfg.aug_noise),
                                    cfg.image_size));
    LossReport report = train_step(state, batch);
    result.reports.push_back(report);

    bool do_eval = val && (state.step % cfg.eval_every == 0 || state.step == end_step);
    double val_map = -1;
    if (do_eval) {
      val_map = evaluate_split(state.student, state.anchors, *val, val_dir).map;
      lr_schedule(state, val_map);
      result.evals.push_back({state.step, val_map});
      result.final_map = val_map;
      if (progress)
        *progress << "step " << state.step << " total " << report.total << " val_map "
                  << val_map << " lr " << state.lr << "\n";
    }
    if (log) {
      *log << report.csv_row() << ",";
      if (val_map >= 0) *log << val_map;
      *log << "\n";
    }
  }
  return result;
}

}  // namespace omnidet::trainer
