#include "resnest/training.hpp"

#include <numbers>
#include <sstream>

namespace resnest {

void ScheduleConfig::validate() const {
  require(base_lr > 0.0, "base_lr must be > 0");
  require(batch_size >= 1, "batch must be >= 1");
  require(steps_per_epoch >= 1, "steps_per_epoch must be >= 1");
  require(total_epochs >= 1, "epochs must be >= 1");
  require(warmup_epochs >= 0 && warmup_epochs < total_epochs,
          "warmup_epochs must be in [0, epochs), got " + std::to_string(warmup_epochs) + " with " +
              std::to_string(total_epochs) + " epochs");
}

double lr_at(Index step, const ScheduleConfig& cfg) {
  cfg.validate();
  const Index total = cfg.total_steps();
  if (step < 0 || step >= total) {
    throw ConfigError("step " + std::to_string(step) + " outside schedule [0, " +
                      std::to_string(total) + ")");
  }
  const double peak = cfg.peak_lr();
  const Index warmup = cfg.warmup_steps();
  if (step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double t = static_cast<double>(step - warmup);
  const double span = static_cast<double>(total - warmup);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * t / span));
}

void LossConfig::validate() const {
  require(smoothing >= 0.0 && smoothing < 1.0, "smoothing must be in [0, 1)");
  require(num_classes >= 2, "label smoothing needs at least two classes");
}

NetworkConfig TrainConfig::micro_network() {
  NetworkConfig n;
  n.depth = 0;
  n.stage_blocks = {1, 1, 1, 1};
  n.stem_width = 8;
  n.base_planes = 16;
  n.radix = 2;
  n.cardinality = 1;
  n.base_width = 64;
  n.num_classes = 2;
  n.dropblock_prob = 0.1;
  n.dropblock_size = 3;
  return n;
}

ScheduleConfig TrainConfig::schedule() const {
  ScheduleConfig s;
  s.base_lr = base_lr;
  s.batch_size = batch;
  s.warmup_epochs = warmup_epochs;
  s.total_epochs = epochs;
  s.steps_per_epoch = batch >= 1 ? data.samples / batch : 0;
  return s;
}

SyntheticConfig TrainConfig::dataset() const {
  SyntheticConfig d = data;
  d.channels = network.input_channels;
  d.seed = seed;
  return d;
}

void TrainConfig::validate() const {
  network.validate();
  require(network.num_classes == 2, "the synthetic task has two classes; set classes=2");
  require(data.size >= kMinInputSize, "synthetic images must be at least 32x32");
  require(data.noise >= 0.0, "noise must be >= 0");
  require(batch >= 2, "batch must be >= 2 (batch norm needs several samples)");
  require(data.samples >= batch, "samples (" + std::to_string(data.samples) +
                                     ") must be at least one batch (" + std::to_string(batch) +
                                     ")");
  require(!mixup.enabled || mixup.alpha > 0.0, "mixup_alpha must be > 0");
  require(smoothing >= 0.0 && smoothing < 1.0, "smoothing must be in [0, 1)");
  require(optimizer.momentum >= 0.0 && optimizer.momentum < 1.0, "momentum must be in [0, 1)");
  require(optimizer.weight_decay >= 0.0, "weight_decay must be >= 0");
  schedule().validate();
}

std::string TrainConfig::describe() const {
  std::ostringstream out;
  out << network.describe() << " | epochs=" << epochs << " batch=" << batch
      << " base_lr=" << base_lr << " warmup_epochs=" << warmup_epochs
      << " mixup=" << mixup.enabled << " mixup_alpha=" << mixup.alpha
      << " smoothing=" << smoothing << " momentum=" << optimizer.momentum
      << " weight_decay=" << optimizer.weight_decay << " samples=" << data.samples
      << " noise=" << data.noise << " dropblock_prob=" << network.dropblock_prob
      << " dropblock_size=" << network.dropblock_size << " seed=" << seed;
  return out.str();
}

bool apply_train_key(TrainConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "epochs") {
    cfg.epochs = parse_int(key, value);
  } else if (key == "batch") {
    cfg.batch = parse_int(key, value);
  } else if (key == "base_lr") {
    cfg.base_lr = parse_double(key, value);
  } else if (key == "warmup_epochs") {
    cfg.warmup_epochs = parse_int(key, value);
  } else if (key == "mixup") {
    cfg.mixup.enabled = parse_bool(key, value);
  } else if (key == "mixup_alpha") {
    cfg.mixup.alpha = parse_double(key, value);
  } else if (key == "smoothing") {
    cfg.smoothing = parse_double(key, value);
  } else if (key == "weight_decay") {
    cfg.optimizer.weight_decay = parse_double(key, value);
  } else if (key == "momentum") {
    cfg.optimizer.momentum = parse_double(key, value);
  } else if (key == "seed") {
    const auto seed = parse_int(key, value);
    require(seed >= 0, "key 'seed': must be >= 0");
    cfg.seed = static_cast<std::uint64_t>(seed);
  } else if (key == "samples") {
    cfg.data.samples = parse_int(key, value);
  } else if (key == "noise") {
    cfg.data.noise = parse_double(key, value);
  } else if (key == "image_size") {
    cfg.data.size = parse_int(key, value);
  } else {
    return apply_network_key(cfg.network, key, value);
  }
  return true;
}

std::string format_metrics(const EpochMetrics& m) {
  char buffer[128];
  std::snprintf(buffer, sizeof buffer, "%lld\t%.17g\t%.17g\t%.17g", static_cast<long long>(m.epoch),
                m.loss, m.accuracy, m.lr);
  return buffer;
}

}  // namespace resnest
