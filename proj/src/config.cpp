#include "pcan/config.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <vector>

#include "pcan/errors.hpp"

namespace pcan {
namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::uint64_t parse_u64(const std::string& s, const std::string& key) {
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw ConfigError(key + ": '" + s + "' is not an unsigned integer");
  }
  return v;
}

double parse_f64(const std::string& s, const std::string& key) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": '" + s + "' is not a number");
  }
}

bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(key + ": '" + s + "' is not a boolean");
}

std::vector<std::size_t> parse_u64_list(const std::string& s, const std::string& key) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t comma = s.find(',', start);
    const std::string item =
        trim(s.substr(start, comma == std::string::npos ? comma : comma - start));
    if (item.empty()) throw ConfigError(key + ": empty list element");
    out.push_back(parse_u64(item, key));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

std::string format_f64(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string format_u64_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i > 0) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

struct KeyEntry {
  std::string section;
  std::string key;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<KeyEntry>& key_table() {
  static const std::vector<KeyEntry> table = [] {
    std::vector<KeyEntry> t;
    auto add = [&t](const std::string& sec, const std::string& key, auto set, auto get) {
      t.push_back({sec, key,
                   [set](RunConfig& c, const std::string& v, const std::string& k) { set(c, v, k); },
                   [get](const RunConfig& c) { return get(c); }});
    };

    // [model]
    add("model", "clusters",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.model.vlad.clusters = parse_u64(v, k);
        },
        [](const RunConfig& c) { return std::to_string(c.model.vlad.clusters); });
    add("model", "backbone_widths",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.model.backbone.mlp_widths = parse_u64_list(v, k);
        },
        [](const RunConfig& c) { return format_u64_list(c.model.backbone.mlp_widths); });
    add("model", "use_input_tnet",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.model.backbone.use_input_tnet = parse_bool(v, k);
        },
        [](const RunConfig& c) { return c.model.backbone.use_input_tnet ? "true" : "false"; });
    add("model", "use_feature_tnet",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.model.backbone.use_feature_tnet = parse_bool(v, k);
        },
        [](const RunConfig& c) { return c.model.backbone.use_feature_tnet ? "true" : "false"; });
    add("model", "tnet_widths",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.model.backbone.tnet_mlp_widths = parse_u64_list(v, k);
        },
        [](const RunConfig& c) { return format_u64_list(c.model.backbone.tnet_mlp_widths); });
    add("model", "tnet_fc_widths",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.model.backbone.tnet_fc_widths = parse_u64_list(v, k);
        },
        [](const RunConfig& c) { return format_u64_list(c.model.backbone.tnet_fc_widths); });
    add("model", "attention_mode",
        [](RunConfig& c, const std::string& v, const std::string&) {
          c.model.attention_mode = attention_mode_from(v);
        },
        [](const RunConfig& c) { return attention_mode_name(c.model.attention_mode); });
    add("model", "msg_scales",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.model.attention.msg_scales = parse_u64(v, k);
        },
        [](const RunConfig& c) { return std::to_string(c.model.attention.msg_scales); });

    // [attention]
    add("attention", "n_centroids",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.model.attention.n_centroids = parse_u64(v, k);
          for (auto& s : c.model.attention.scales) s.n_centroids = c.model.attention.n_centroids;
        },
        [](const RunConfig& c) { return std::to_string(c.model.attention.n_centroids); });
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string base = "sag" + std::to_string(i + 1);
      add("attention", base + "_radius",
          [i](RunConfig& c, const std::string& v, const std::string& k) {
            c.model.attention.scales[i].radius = parse_f64(v, k);
          },
          [i](const RunConfig& c) { return format_f64(c.model.attention.scales[i].radius); });
      add("attention", base + "_group",
          [i](RunConfig& c, const std::string& v, const std::string& k) {
            c.model.attention.scales[i].k = parse_u64(v, k);
          },
          [i](const RunConfig& c) { return std::to_string(c.model.attention.scales[i].k); });
      add("attention", base + "_widths",
          [i](RunConfig& c, const std::string& v, const std::string& k) {
            c.model.attention.scales[i].mlp_widths = parse_u64_list(v, k);
          },
          [i](const RunConfig& c) {
            return format_u64_list(c.model.attention.scales[i].mlp_widths);
          });
    }
    add("attention", "accum_widths",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.model.attention.accum_mlp = parse_u64_list(v, k);
        },
        [](const RunConfig& c) { return format_u64_list(c.model.attention.accum_mlp); });
    add("attention", "fp1_widths",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.model.attention.fp1_widths = parse_u64_list(v, k);
        },
        [](const RunConfig& c) { return format_u64_list(c.model.attention.fp1_widths); });
    add("attention", "fp2_widths",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.model.attention.fp2_widths = parse_u64_list(v, k);
        },
        [](const RunConfig& c) { return format_u64_list(c.model.attention.fp2_widths); });
    add("attention", "fc_widths",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.model.attention.fc_widths = parse_u64_list(v, k);
        },
        [](const RunConfig& c) { return format_u64_list(c.model.attention.fc_widths); });

    // [train]
    add("train", "lr",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.train.lr = parse_f64(v, k);
        },
        [](const RunConfig& c) { return format_f64(c.train.lr); });
    add("train", "optimizer",
        [](RunConfig& c, const std::string& v, const std::string&) { c.train.optimizer = v; },
        [](const RunConfig& c) { return c.train.optimizer; });
    add("train", "epochs",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.train.epochs = parse_u64(v, k);
        },
        [](const RunConfig& c) { return std::to_string(c.train.epochs); });
    add("train", "tuples_per_step",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.train.tuples_per_step = parse_u64(v, k);
        },
        [](const RunConfig& c) { return std::to_string(c.train.tuples_per_step); });
    add("train", "seed",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.train.seed = parse_u64(v, k);
        },
        [](const RunConfig& c) { return std::to_string(c.train.seed); });
    add("train", "precision",
        [](RunConfig& c, const std::string& v, const std::string&) { c.train.precision = v; },
        [](const RunConfig& c) { return c.train.precision; });
    add("train", "checkpoint_every",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.train.checkpoint_every = parse_u64(v, k);
        },
        [](const RunConfig& c) { return std::to_string(c.train.checkpoint_every); });

    // [mining]
    add("mining", "n_pos",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.mining.n_pos = parse_u64(v, k);
        },
        [](const RunConfig& c) { return std::to_string(c.mining.n_pos); });
    add("mining", "n_neg",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.mining.n_neg = parse_u64(v, k);
        },
        [](const RunConfig& c) { return std::to_string(c.mining.n_neg); });
    add("mining", "positive_radius",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.mining.positive_radius = parse_f64(v, k);
        },
        [](const RunConfig& c) { return format_f64(c.mining.positive_radius); });
    add("mining", "negative_radius",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.mining.negative_radius = parse_f64(v, k);
        },
        [](const RunConfig& c) { return format_f64(c.mining.negative_radius); });

    // [loss]
    add("loss", "alpha",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.loss.alpha = parse_f64(v, k);
        },
        [](const RunConfig& c) { return format_f64(c.loss.alpha); });
    add("loss", "beta",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.loss.beta = parse_f64(v, k);
        },
        [](const RunConfig& c) { return format_f64(c.loss.beta); });

    // [synth]
    add("synth", "n_scenes",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.synth.n_scenes = parse_u64(v, k);
        },
        [](const RunConfig& c) { return std::to_string(c.synth.n_scenes); });
    add("synth", "n_test_scenes",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.synth.n_test_scenes = parse_u64(v, k);
        },
        [](const RunConfig& c) { return std::to_string(c.synth.n_test_scenes); });
    add("synth", "scans_per_scene",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.synth.scans_per_scene = parse_u64(v, k);
        },
        [](const RunConfig& c) { return std::to_string(c.synth.scans_per_scene); });
    add("synth", "points_per_scene",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.synth.points_per_scene = parse_u64(v, k);
        },
        [](const RunConfig& c) { return std::to_string(c.synth.points_per_scene); });
    add("synth", "structure_fraction",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.synth.structure_fraction = parse_f64(v, k);
        },
        [](const RunConfig& c) { return format_f64(c.synth.structure_fraction); });
    add("synth", "foliage_fraction",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.synth.foliage_fraction = parse_f64(v, k);
        },
        [](const RunConfig& c) { return format_f64(c.synth.foliage_fraction); });
    add("synth", "floater_fraction",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.synth.floater_fraction = parse_f64(v, k);
        },
        [](const RunConfig& c) { return format_f64(c.synth.floater_fraction); });
    add("synth", "jitter_scale",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.synth.jitter_scale = parse_f64(v, k);
        },
        [](const RunConfig& c) { return format_f64(c.synth.jitter_scale); });
    add("synth", "grid_spacing_m",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.synth.grid_spacing_m = parse_f64(v, k);
        },
        [](const RunConfig& c) { return format_f64(c.synth.grid_spacing_m); });
    add("synth", "scan_offset_m",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.synth.scan_offset_m = parse_f64(v, k);
        },
        [](const RunConfig& c) { return format_f64(c.synth.scan_offset_m); });
    add("synth", "seed",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.synth.seed = parse_u64(v, k);
        },
        [](const RunConfig& c) { return std::to_string(c.synth.seed); });

    // [eval]
    add("eval", "max_n",
        [](RunConfig& c, const std::string& v, const std::string& k) {
          c.eval_max_n = parse_u64(v, k);
        },
        [](const RunConfig& c) { return std::to_string(c.eval_max_n); });

    return t;
  }();
  return table;
}

const KeyEntry* find_entry(const std::string& section, const std::string& key) {
  for (const auto& e : key_table()) {
    if (section == e.section && key == e.key) return &e;
  }
  return nullptr;
}

}  // namespace

std::string attention_mode_name(AttentionMode mode) {
  return mode == AttentionMode::learned ? "learned" : "constant_one";
}

AttentionMode attention_mode_from(const std::string& name) {
  if (name == "learned") return AttentionMode::learned;
  if (name == "constant_one") return AttentionMode::constant_one;
  throw ConfigError("attention_mode: '" + name + "' is not 'learned' or 'constant_one'");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  mining.validate();
  loss.validate();
  synth.validate();
  if (eval_max_n == 0) throw ConfigError("eval.max_n must be positive");
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line, section;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError("line " + std::to_string(line_no) + ": unterminated section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      bool known = false;
      for (const auto& e : key_table()) {
        if (section == e.section) {
          known = true;
          break;
        }
      }
      if (!known) {
        throw ConfigError("line " + std::to_string(line_no) + ": unknown section [" + section +
                          "]");
      }
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (section.empty()) {
      throw ConfigError("line " + std::to_string(line_no) + ": key '" + key +
                        "' appears before any [section]");
    }
    const KeyEntry* entry = find_entry(section, key);
    if (!entry) {
      throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + section + "." +
                        key + "'");
    }
    entry->set(cfg, value, section + "." + key);
  }
  return cfg;
}

RunConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override '" + assignment + "' must look like section.key=value");
  }
  const std::string path = trim(assignment.substr(0, eq));
  const std::string value = trim(assignment.substr(eq + 1));
  const std::size_t dot = path.find('.');
  if (dot == std::string::npos) {
    throw ConfigError("override '" + assignment + "' must look like section.key=value");
  }
  const std::string section = path.substr(0, dot);
  const std::string key = path.substr(dot + 1);
  const KeyEntry* entry = find_entry(section, key);
  if (!entry) throw ConfigError("unknown key '" + section + "." + key + "'");
  entry->set(cfg, value, path);
}

std::string dump_config(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& e : key_table()) {
    if (section != e.section) {
      if (!out.empty()) out += '\n';
      section = e.section;
      out += '[';
      out += section;
      out += "]\n";
    }
    out += e.key;
    out += " = ";
    out += e.get(cfg);
    out += '\n';
  }
  return out;
}

}  // namespace pcan
