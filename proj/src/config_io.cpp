#include "par/config_io.hpp"

#include <yaml-cpp/yaml.h>

#include <fstream>
#include <set>
#include <sstream>

namespace par {

namespace {

class FieldReader {
 public:
  FieldReader(const YAML::Node& node, std::string section) : node_(node), section_(std::move(section)) {
    if (node_ && !node_.IsMap()) throw ConfigError(section_ + ": expected a mapping");
  }

  template <typename V>
  V required(const std::string& key) {
    seen_.insert(key);
    if (!node_ || !node_[key]) throw ConfigError("missing required field '" + section_ + "." + key + "'");
    return convert<V>(key);
  }

  template <typename V>
  V optional(const std::string& key, const V& fallback) {
    seen_.insert(key);
    if (!node_ || !node_[key]) return fallback;
    return convert<V>(key);
  }

  void reject_unknown() const {
    if (!node_) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.count(key)) throw ConfigError("unknown field '" + section_ + "." + key + "'");
    }
  }

 private:
  template <typename V>
  V convert(const std::string& key) {
    try {
      return node_[key].as<V>();
    } catch (const YAML::Exception&) {
      throw ConfigError("field '" + section_ + "." + key + "' has an invalid value");
    }
  }

  YAML::Node node_;
  std::string section_;
  std::set<std::string> seen_;
};

ModelConfig read_model(const YAML::Node& node) {
  FieldReader r(node, "model");
  ModelConfig c;
  c.vocab_size = r.required<std::size_t>("vocab_size");
  c.max_context = r.required<std::size_t>("max_context");
  c.num_latents = r.required<std::size_t>("num_latents");
  c.num_layers = r.required<std::size_t>("num_layers");
  c.channels = r.optional<std::size_t>("channels", c.channels);
  c.cross_heads = r.optional<std::size_t>("cross_heads", c.cross_heads);
  c.self_heads = r.optional<std::size_t>("self_heads", c.self_heads);
  c.rotary_fraction = r.optional<double>("rotary_fraction", c.rotary_fraction);
  c.latent_mode = latent_mode_from_string(r.optional<std::string>("latent_mode", to_string(c.latent_mode)));
  c.cross_attend_dropout = r.optional<double>("cross_attend_dropout", c.cross_attend_dropout);
  c.post_attention_dropout = r.optional<double>("post_attention_dropout", c.post_attention_dropout);
  c.absolute_position_embedding = r.optional<bool>("absolute_position_embedding", c.absolute_position_embedding);
  c.scale_embedding = r.optional<bool>("scale_embedding", c.scale_embedding);
  c.cross_heads_per_chunk = r.optional<std::size_t>("cross_heads_per_chunk", c.cross_heads_per_chunk);
  c.layer_norm_eps = r.optional<double>("layer_norm_eps", c.layer_norm_eps);
  r.reject_unknown();
  c.validate();
  return c;
}

TrainConfig read_train(const YAML::Node& node) {
  FieldReader r(node, "train");
  TrainConfig c;
  c.batch_size = r.required<std::size_t>("batch_size");
  c.total_steps = r.required<std::size_t>("total_steps");
  c.seed = r.required<std::uint64_t>("seed");
  c.base_lr = r.optional<double>("base_lr", c.base_lr);
  c.warmup_steps = r.optional<std::size_t>("warmup_steps", c.warmup_steps);
  c.decay = decay_from_string(r.optional<std::string>("decay", to_string(c.decay)));
  c.decay_steps = r.optional<std::size_t>("decay_steps", c.decay_steps);
  c.adam_b1 = r.optional<double>("adam_b1", c.adam_b1);
  c.adam_b2 = r.optional<double>("adam_b2", c.adam_b2);
  c.adam_eps = r.optional<double>("adam_eps", c.adam_eps);
  c.max_grad_norm = r.optional<double>("max_grad_norm", c.max_grad_norm);
  c.z_loss_coeff = r.optional<double>("z_loss_coeff", c.z_loss_coeff);
  c.init_std = r.optional<double>("init_std", c.init_std);
  c.log_interval = r.optional<std::size_t>("log_interval", c.log_interval);
  c.checkpoint_interval = r.optional<std::size_t>("checkpoint_interval", c.checkpoint_interval);
  c.eval_interval = r.optional<std::size_t>("eval_interval", c.eval_interval);
  c.eval_sequences = r.optional<std::size_t>("eval_sequences", c.eval_sequences);
  c.stop_accuracy = r.optional<double>("stop_accuracy", c.stop_accuracy);
  r.reject_unknown();
  c.validate();
  return c;
}

TaskConfig read_task(const YAML::Node& node) {
  FieldReader r(node, "task");
  TaskConfig c;
  c.kind = task_kind_from_string(r.required<std::string>("kind"));
  c.data_vocab = r.optional<std::size_t>("data_vocab", c.data_vocab);
  c.k_half = r.optional<std::size_t>("k_half", c.k_half);
  c.window = r.optional<std::size_t>("window", c.window);
  c.offset = r.optional<std::size_t>("offset", c.offset);
  r.reject_unknown();
  c.validate();
  return c;
}

SamplerConfig read_sampler(const YAML::Node& node) {
  FieldReader r(node, "sampler");
  SamplerConfig c;
  c.temperature = r.optional<double>("temperature", c.temperature);
  c.max_new_tokens = r.optional<std::size_t>("max_new_tokens", c.max_new_tokens);
  c.seed = r.optional<std::uint64_t>("seed", c.seed);
  c.eval_latents = r.optional<std::size_t>("eval_latents", c.eval_latents);
  c.greedy = r.optional<bool>("greedy", c.greedy);
  r.reject_unknown();
  c.validate();
  return c;
}

void write_model(YAML::Emitter& out, const ModelConfig& c) {
  out << YAML::BeginMap;
  out << YAML::Key << "vocab_size" << YAML::Value << c.vocab_size;
  out << YAML::Key << "max_context" << YAML::Value << c.max_context;
  out << YAML::Key << "num_latents" << YAML::Value << c.num_latents;
  out << YAML::Key << "num_layers" << YAML::Value << c.num_layers;
  out << YAML::Key << "channels" << YAML::Value << c.channels;
  out << YAML::Key << "cross_heads" << YAML::Value << c.cross_heads;
  out << YAML::Key << "self_heads" << YAML::Value << c.self_heads;
  out << YAML::Key << "rotary_fraction" << YAML::Value << c.rotary_fraction;
  out << YAML::Key << "latent_mode" << YAML::Value << to_string(c.latent_mode);
  out << YAML::Key << "cross_attend_dropout" << YAML::Value << c.cross_attend_dropout;
  out << YAML::Key << "post_attention_dropout" << YAML::Value << c.post_attention_dropout;
  out << YAML::Key << "absolute_position_embedding" << YAML::Value << c.absolute_position_embedding;
  out << YAML::Key << "scale_embedding" << YAML::Value << c.scale_embedding;
  out << YAML::Key << "cross_heads_per_chunk" << YAML::Value << c.cross_heads_per_chunk;
  out << YAML::Key << "layer_norm_eps" << YAML::Value << c.layer_norm_eps;
  out << YAML::EndMap;
}

void write_train(YAML::Emitter& out, const TrainConfig& c) {
  out << YAML::BeginMap;
  out << YAML::Key << "batch_size" << YAML::Value << c.batch_size;
  out << YAML::Key << "total_steps" << YAML::Value << c.total_steps;
  out << YAML::Key << "seed" << YAML::Value << c.seed;
  out << YAML::Key << "base_lr" << YAML::Value << c.base_lr;
  out << YAML::Key << "warmup_steps" << YAML::Value << c.warmup_steps;
  out << YAML::Key << "decay" << YAML::Value << to_string(c.decay);
  out << YAML::Key << "decay_steps" << YAML::Value << c.decay_steps;
  out << YAML::Key << "adam_b1" << YAML::Value << c.adam_b1;
  out << YAML::Key << "adam_b2" << YAML::Value << c.adam_b2;
  out << YAML::Key << "adam_eps" << YAML::Value << c.adam_eps;
  out << YAML::Key << "max_grad_norm" << YAML::Value << c.max_grad_norm;
  out << YAML::Key << "z_loss_coeff" << YAML::Value << c.z_loss_coeff;
  out << YAML::Key << "init_std" << YAML::Value << c.init_std;
  out << YAML::Key << "log_interval" << YAML::Value << c.log_interval;
  out << YAML::Key << "checkpoint_interval" << YAML::Value << c.checkpoint_interval;
  out << YAML::Key << "eval_interval" << YAML::Value << c.eval_interval;
  out << YAML::Key << "eval_sequences" << YAML::Value << c.eval_sequences;
  out << YAML::Key << "stop_accuracy" << YAML::Value << c.stop_accuracy;
  out << YAML::EndMap;
}

void write_task(YAML::Emitter& out, const TaskConfig& c) {
  out << YAML::BeginMap;
  out << YAML::Key << "kind" << YAML::Value << to_string(c.kind);
  out << YAML::Key << "data_vocab" << YAML::Value << c.data_vocab;
  out << YAML::Key << "k_half" << YAML::Value << c.k_half;
  out << YAML::Key << "window" << YAML::Value << c.window;
  out << YAML::Key << "offset" << YAML::Value << c.offset;
  out << YAML::EndMap;
}

void write_sampler(YAML::Emitter& out, const SamplerConfig& c) {
  out << YAML::BeginMap;
  out << YAML::Key << "temperature" << YAML::Value << c.temperature;
  out << YAML::Key << "max_new_tokens" << YAML::Value << c.max_new_tokens;
  out << YAML::Key << "seed" << YAML::Value << c.seed;
  out << YAML::Key << "eval_latents" << YAML::Value << c.eval_latents;
  out << YAML::Key << "greedy" << YAML::Value << c.greedy;
  out << YAML::EndMap;
}

YAML::Node parse_yaml(const std::string& text) {
  try {
    return YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

void configure(YAML::Emitter& out) {
  out.SetDoublePrecision(17);
  out.SetFloatPrecision(9);
}

}  // namespace

RunConfig parse_run_config(const std::string& yaml_text, bool for_training) {
  const YAML::Node root = parse_yaml(yaml_text);
  if (!root.IsMap()) throw ConfigError("config must be a mapping with model/train/task/sampler sections");
  for (const auto& kv : root) {
    const auto key = kv.first.as<std::string>();
    if (key != "model" && key != "train" && key != "task" && key != "sampler" && key != "run") {
      throw ConfigError("unknown section '" + key + "'");
    }
  }
  if (!root["model"]) throw ConfigError("missing required section 'model'");
  RunConfig cfg;
  cfg.model = read_model(root["model"]);
  if (for_training && !root["train"]) throw ConfigError("missing required section 'train'");
  if (for_training && !root["task"]) throw ConfigError("missing required section 'task'");
  if (root["train"]) cfg.train = read_train(root["train"]);
  if (root["task"]) cfg.task = read_task(root["task"]);
  cfg.sampler = read_sampler(root["sampler"]);
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path, bool for_training) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), for_training);
}

std::string emit_run_config(const RunConfig& cfg) {
  YAML::Emitter out;
  configure(out);
  out << YAML::BeginMap;
  out << YAML::Key << "model" << YAML::Value;
  write_model(out, cfg.model);
  out << YAML::Key << "train" << YAML::Value;
  write_train(out, cfg.train);
  out << YAML::Key << "task" << YAML::Value;
  write_task(out, cfg.task);
  out << YAML::Key << "sampler" << YAML::Value;
  write_sampler(out, cfg.sampler);
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

std::string emit_model_config(const ModelConfig& cfg) {
  YAML::Emitter out;
  configure(out);
  write_model(out, cfg);
  return out.c_str();
}

ModelConfig parse_model_config(const std::string& yaml_text) { return read_model(parse_yaml(yaml_text)); }

}  // namespace par
