#include "covmon/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace covmon {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            if (!trim(cur).empty()) out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!trim(cur).empty()) out.push_back(trim(cur));
    return out;
}

uint64_t fnv64(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

AttackMethod method_from_name(const std::string& name) {
    if (name == "fgsm") return AttackMethod::kFgsm;
    if (name == "pgd") return AttackMethod::kPgd;
    if (name == "bim") return AttackMethod::kBim;
    if (name == "cw") return AttackMethod::kCw;
    if (name == "ood") return AttackMethod::kOod;
    if (name == "patch") return AttackMethod::kPatch;
    if (name == "signature") return AttackMethod::kSignature;
    throw ConfigError("unknown attack method: " + name);
}

DatasetFile dataset_file(const IniFile::Section* s, const std::string& prefix,
                         const std::string& default_name) {
    DatasetFile f;
    f.filename = default_name;
    if (s) {
        f.filename = s->get(prefix + "_file", default_name);
        for (const auto& url : split(s->get(prefix + "_url", ""), ' ')) f.urls.push_back(url);
        f.sha256 = s->get(prefix + "_sha256", "");
        f.byte_size = static_cast<uint64_t>(s->get_int(prefix + "_bytes", 0));
    }
    return f;
}

}  // namespace

const std::string* IniFile::Section::find(const std::string& key) const {
    for (const auto& [k, v] : entries)
        if (k == key) return &v;
    return nullptr;
}

std::string IniFile::Section::get(const std::string& key, const std::string& fallback) const {
    const std::string* v = find(key);
    return v ? *v : fallback;
}

double IniFile::Section::get_num(const std::string& key, double fallback) const {
    const std::string* v = find(key);
    if (!v) return fallback;
    try {
        return std::stod(*v);
    } catch (const std::exception&) {
        throw ConfigError("bad numeric value for '" + key + "': " + *v);
    }
}

int64_t IniFile::Section::get_int(const std::string& key, int64_t fallback) const {
    const std::string* v = find(key);
    if (!v) return fallback;
    try {
        return std::stoll(*v);
    } catch (const std::exception&) {
        throw ConfigError("bad integer value for '" + key + "': " + *v);
    }
}

IniFile IniFile::parse_text(const std::string& text) {
    IniFile file;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    Section* cur = nullptr;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw ConfigError("line " + std::to_string(lineno) + ": unterminated section");
            file.sections.push_back({trim(t.substr(1, t.size() - 2)), {}});
            cur = &file.sections.back();
            continue;
        }
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        if (!cur) throw ConfigError("line " + std::to_string(lineno) + ": entry outside a section");
        cur->entries.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return file;
}

IniFile IniFile::parse_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_text(ss.str());
}

const IniFile::Section* IniFile::find(const std::string& name) const {
    for (const auto& s : sections)
        if (s.name == name) return &s;
    return nullptr;
}

std::filesystem::path default_cache_dir() {
    if (const char* env = std::getenv("COVMON_CACHE")) return env;
    if (const char* home = std::getenv("HOME"))
        return std::filesystem::path(home) / ".cache" / "covmon";
    return "covmon-cache";
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
    IniFile ini = IniFile::parse_file(path);
    ExperimentConfig cfg;

    if (const auto* s = ini.find("experiment")) {
        cfg.dataset = s->get("dataset", cfg.dataset);
        cfg.seed = static_cast<uint64_t>(s->get_int("seed", 1));
        cfg.workers = static_cast<int>(s->get_int("workers", 1));
        cfg.out_dir = s->get("out_dir", cfg.out_dir.string());
        std::string cache = s->get("cache_dir", "");
        cfg.cache_dir = cache.empty() ? default_cache_dir() : std::filesystem::path(cache);
    } else {
        cfg.cache_dir = default_cache_dir();
    }

    const auto* ds = ini.find("dataset");
    cfg.dataset_spec.name = cfg.dataset;
    cfg.dataset_spec.train_images = dataset_file(ds, "train_images", "train-images-idx3-ubyte");
    cfg.dataset_spec.train_labels = dataset_file(ds, "train_labels", "train-labels-idx1-ubyte");
    cfg.dataset_spec.test_images = dataset_file(ds, "test_images", "t10k-images-idx3-ubyte");
    cfg.dataset_spec.test_labels = dataset_file(ds, "test_labels", "t10k-labels-idx1-ubyte");

    if (const auto* s = ini.find("model")) {
        cfg.classes = static_cast<int>(s->get_int("classes", 10));
        cfg.train.epochs = static_cast<int>(s->get_int("epochs", 8));
        cfg.train.batch_size = static_cast<int>(s->get_int("batch_size", 64));
        cfg.train.learning_rate = s->get_num("learning_rate", 1e-3);
        cfg.train.beta1 = s->get_num("beta1", 0.9);
        cfg.train.beta2 = s->get_num("beta2", 0.999);
        cfg.train.adam_eps = s->get_num("adam_eps", 1e-8);
    }
    cfg.train.seed = cfg.seed;

    if (const auto* s = ini.find("trusted")) {
        cfg.trusted_threshold = static_cast<float>(s->get_num("score_threshold", 0.9));
        cfg.trusted_test_cap = static_cast<size_t>(s->get_int("test_cap", 9000));
        cfg.calibration_safe = static_cast<size_t>(s->get_int("calibration_safe", 4500));
    }

    if (const auto* s = ini.find("monitor")) {
        if (const auto* taps = s->find("taps")) {
            cfg.monitor.taps.clear();
            for (const auto& t : split(*taps, ',')) cfg.monitor.taps.push_back(std::stoi(t));
        }
        if (const auto* cams = s->find("cams")) cfg.monitor.cams = split(*cams, ',');
        if (const auto* ec = s->find("eval_cams")) cfg.monitor.eval_cams = split(*ec, ',');
        cfg.monitor.mrc16_sections = static_cast<int>(s->get_int("mrc16_sections", 16));
        cfg.monitor.mrc32_sections = static_cast<int>(s->get_int("mrc32_sections", 32));
        cfg.monitor.nrc_p = static_cast<int>(s->get_int("nrc_p", 2));
        cfg.monitor.knnc_g = static_cast<int>(s->get_int("knnc_g", 75));
        cfg.monitor.knnc_mode =
            s->get("knnc_mode", "mismatch") == "literal" ? KnncCount::kMatchLiteral
                                                         : KnncCount::kMismatch;
        cfg.monitor.baselines = s->get("baselines", "on") != "off";
        cfg.monitor.vg_quality = static_cast<int>(s->get_int("vg_quality", 50));
        cfg.monitor.fs_bits = static_cast<int>(s->get_int("fs_bits", 1));
        cfg.monitor.fs_window = static_cast<int>(s->get_int("fs_window", 2));
    }

    for (const auto& section : ini.sections) {
        if (section.name.rfind("attack:", 0) != 0) continue;
        AttackEntry entry;
        entry.name = section.get("label", section.name.substr(7));
        entry.config.method = method_from_name(section.get("method", ""));
        entry.config.epsilon = section.get_num("epsilon", 0.1);
        entry.config.alpha = section.get_num("alpha", 0.01);
        entry.config.iterations = static_cast<int>(section.get_int("iterations", 1));
        entry.config.wrong_score_threshold = section.get_num("wrong_score", 0.8);
        entry.config.random_start = section.get("random_start", "off") == "on";
        entry.config.cw_c = section.get_num("cw_c", 1e-4);
        entry.config.cw_kappa = section.get_num("cw_kappa", 0.0);
        entry.config.cw_lr = section.get_num("cw_lr", 0.01);
        entry.config.cw_objective = section.get("cw_objective", "canonical") == "distortion_weighted"
                                        ? CwObjective::kDistortionWeighted
                                        : CwObjective::kCanonical;
        entry.config.cw_keep_final = section.get("cw_keep_final", "off") == "on";
        entry.config.patch.y = static_cast<int>(section.get_int("patch_y", 0));
        entry.config.patch.x = static_cast<int>(section.get_int("patch_x", 0));
        entry.config.patch.height = static_cast<int>(section.get_int("patch_h", 8));
        entry.config.patch.width = static_cast<int>(section.get_int("patch_w", 8));
        entry.calibration_count = static_cast<size_t>(section.get_int("calibration", 0));
        entry.evaluation_count = static_cast<size_t>(section.get_int("evaluation", 0));
        entry.max_attempts = static_cast<size_t>(section.get_int("max_attempts", 0));
        cfg.roster.push_back(std::move(entry));
    }

    if (const auto* s = ini.find("adaptive")) {
        cfg.adaptive.epsilon = s->get_num("epsilon", 0.1);
        cfg.adaptive.alpha = s->get_num("alpha", 0.004);
        cfg.adaptive.iterations = static_cast<int>(s->get_int("iterations", 40));
        if (const auto* g = s->find("gammas")) {
            cfg.adaptive.gammas.clear();
            for (const auto& v : split(*g, ',')) cfg.adaptive.gammas.push_back(std::stod(v));
        }
        if (const auto* g = s->find("recalibration_gammas")) {
            cfg.adaptive.recalibration_gammas.clear();
            for (const auto& v : split(*g, ','))
                cfg.adaptive.recalibration_gammas.push_back(std::stod(v));
        }
        cfg.adaptive.calibration_per_gamma =
            static_cast<size_t>(s->get_int("calibration_per_gamma", 400));
        cfg.adaptive.evaluation_per_gamma =
            static_cast<size_t>(s->get_int("evaluation_per_gamma", 2000));
        cfg.adaptive.wrong_score_threshold = s->get_num("wrong_score", 0.8);
        if (const auto* ac = s->find("cams")) cfg.adaptive.cams = split(*ac, ',');
    }

    if (const auto* s = ini.find("bench")) {
        cfg.bench.inferences = static_cast<int>(s->get_int("inferences", 1000));
        cfg.bench.warmup = static_cast<int>(s->get_int("warmup", 100));
        cfg.bench.knnc_rows_cap = static_cast<uint64_t>(s->get_int("knnc_rows_cap", 5000));
        if (const auto* inst = s->find("installations")) {
            cfg.bench.installations.clear();
            for (const auto& one : split(*inst, '|')) {
                TapSet taps;
                for (const auto& t : split(one, ',')) taps.push_back(std::stoi(t));
                cfg.bench.installations.push_back(taps);
            }
        }
    }

    if (const auto* s = ini.find("sweep")) {
        if (const auto* eps = s->find("epsilons")) {
            cfg.sweep.epsilons.clear();
            for (const auto& v : split(*eps, ',')) cfg.sweep.epsilons.push_back(std::stod(v));
        }
    }

    if (cfg.monitor.taps.empty()) throw ConfigError("tap installation must be non-empty");
    return cfg;
}

uint64_t ExperimentConfig::stage_hash(const std::string& stage) const {
    std::ostringstream ss;
    ss << dataset << '|' << classes << '|' << seed << '|';
    if (stage == "dataset") {
        ss << dataset_spec.train_images.sha256 << dataset_spec.test_images.sha256;
    } else if (stage == "train") {
        ss << train.epochs << '|' << train.batch_size << '|' << train.learning_rate << '|'
           << train.beta1 << '|' << train.beta2 << '|' << train.adam_eps;
    } else if (stage == "trusted") {
        ss << stage_hash("train") << '|' << trusted_threshold << '|' << trusted_test_cap;
    } else if (stage == "monitor") {
        ss << stage_hash("trusted") << '|';
        for (int t : monitor.taps) ss << t << ',';
        ss << '|' << monitor.mrc16_sections << '|' << monitor.mrc32_sections << '|'
           << monitor.nrc_p << '|' << monitor.knnc_g;
    } else if (stage == "roster") {
        ss << stage_hash("train") << '|';
        for (const auto& a : roster)
            ss << a.name << ',' << static_cast<int>(a.config.method) << ',' << a.config.epsilon
               << ',' << a.config.alpha << ',' << a.config.iterations << ','
               << a.config.wrong_score_threshold << ',' << a.calibration_count << ','
               << a.evaluation_count << ',' << a.max_attempts << ','
               << static_cast<int>(a.config.cw_objective) << ',' << a.config.cw_lr << ','
               << a.config.cw_keep_final << ';';
    } else if (stage == "adaptive") {
        ss << stage_hash("monitor") << '|' << adaptive.epsilon << '|' << adaptive.alpha << '|'
           << adaptive.iterations << '|' << adaptive.calibration_per_gamma << '|'
           << adaptive.evaluation_per_gamma << '|';
        for (double g : adaptive.gammas) ss << g << ',';
        for (double g : adaptive.recalibration_gammas) ss << g << ',';
    } else if (stage == "calibrate") {
        ss << stage_hash("monitor") << '|' << stage_hash("roster") << '|' << calibration_safe;
    } else {
        ss << stage;
    }
    return fnv64(ss.str());
}

}  // namespace covmon
