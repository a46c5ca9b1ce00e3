#include "emostyle/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <system_error>

#include "emostyle/errors.hpp"

namespace emostyle {

namespace {

std::string trim(std::string_view s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    std::size_t e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& value, const std::string& key, const std::string& where) {
    T out{};
    const char* first = value.data();
    const char* last = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc() || ptr != last)
        throw ValidationError(where + ": bad value '" + value + "' for key '" + key + "'");
    return out;
}

void set_field(TrainConfig& cfg, const std::string& key, const std::string& value,
               const std::string& where) {
    if (key == "stage")
        cfg.stage = parse_number<int>(value, key, where);
    else if (key == "epochs")
        cfg.epochs = parse_number<int>(value, key, where);
    else if (key == "batch_size")
        cfg.batch_size = parse_number<int>(value, key, where);
    else if (key == "learning_rate")
        cfg.learning_rate = parse_number<double>(value, key, where);
    else if (key == "optimizer")
        cfg.optimizer = value;
    else if (key == "seed")
        cfg.seed = parse_number<std::uint64_t>(value, key, where);
    else if (key == "K")
        cfg.K = parse_number<int>(value, key, where);
    else if (key == "tau")
        cfg.tau = parse_number<double>(value, key, where);
    else if (key == "dataset")
        cfg.dataset = value;
    else if (key == "align_weight")
        cfg.align_weight = parse_number<double>(value, key, where);
    else if (key == "drop_style")
        cfg.drop_style = parse_number<double>(value, key, where);
    else if (key == "drop_content")
        cfg.drop_content = parse_number<double>(value, key, where);
    else if (key == "precision")
        cfg.precision = value;
    else
        throw ValidationError(where + ": unknown key '" + key + "'");
}

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    return std::string(buf, ptr);
}

}  // namespace

double TrainConfig::effective_learning_rate() const {
    if (learning_rate != 0.0) return learning_rate;
    return stage == 1 ? 1e-3 : 3e-4;
}

void TrainConfig::validate() const {
    if (stage != 1 && stage != 2) throw ValidationError("config: stage must be 1 or 2");
    if (epochs < 1) throw ValidationError("config: epochs must be at least 1");
    if (batch_size < 1) throw ValidationError("config: batch_size must be at least 1");
    if (learning_rate < 0.0 || !(effective_learning_rate() > 0.0))
        throw ValidationError("config: learning_rate must be positive (0 selects the stage default)");
    if (optimizer != "sgd" && optimizer != "adam" && optimizer != "lloyd")
        throw ValidationError("config: optimizer must be sgd, adam, or lloyd");
    if (optimizer == "lloyd" && stage != 1)
        throw ValidationError("config: lloyd optimizer applies to stage 1 only");
    if (K < 1) throw ValidationError("config: K must be at least 1");
    if (!(tau > 0.0)) throw ValidationError("config: tau must be positive");
    if (align_weight < 0.0) throw ValidationError("config: align_weight must be non-negative");
    if (drop_style < 0.0 || drop_style > 1.0)
        throw ValidationError("config: drop_style must lie in [0, 1]");
    if (drop_content < 0.0 || drop_content > 1.0)
        throw ValidationError("config: drop_content must lie in [0, 1]");
    if (precision != "f32" && precision != "f64")
        throw ValidationError("config: precision must be f32 or f64");
}

TrainConfig parse_config(const std::string& text) {
    TrainConfig cfg;
    std::istringstream in(text);
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string stripped = trim(line);
        if (stripped.empty()) continue;
        const std::string where = "config line " + std::to_string(lineno);
        auto eq = stripped.find('=');
        if (eq == std::string::npos)
            throw ValidationError(where + ": expected key = value, got '" + stripped + "'");
        const std::string key = trim(std::string_view(stripped).substr(0, eq));
        const std::string value = trim(std::string_view(stripped).substr(eq + 1));
        if (key.empty()) throw ValidationError(where + ": empty key");
        set_field(cfg, key, value, where);
    }
    return cfg;
}

TrainConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config file '" + path.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

void apply_override(TrainConfig& cfg, const std::string& key_eq_value) {
    auto eq = key_eq_value.find('=');
    if (eq == std::string::npos)
        throw ValidationError("override '" + key_eq_value + "': expected key=value");
    const std::string key = trim(std::string_view(key_eq_value).substr(0, eq));
    const std::string value = trim(std::string_view(key_eq_value).substr(eq + 1));
    if (key.empty()) throw ValidationError("override '" + key_eq_value + "': empty key");
    set_field(cfg, key, value, "override");
}

std::string dump_config(const TrainConfig& cfg) {
    std::ostringstream out;
    out << "stage = " << cfg.stage << '\n';
    out << "epochs = " << cfg.epochs << '\n';
    out << "batch_size = " << cfg.batch_size << '\n';
    out << "learning_rate = " << format_double(cfg.learning_rate) << '\n';
    out << "optimizer = " << cfg.optimizer << '\n';
    out << "seed = " << cfg.seed << '\n';
    out << "K = " << cfg.K << '\n';
    out << "tau = " << format_double(cfg.tau) << '\n';
    out << "dataset = " << cfg.dataset << '\n';
    out << "align_weight = " << format_double(cfg.align_weight) << '\n';
    out << "drop_style = " << format_double(cfg.drop_style) << '\n';
    out << "drop_content = " << format_double(cfg.drop_content) << '\n';
    out << "precision = " << cfg.precision << '\n';
    return out.str();
}

std::uint64_t config_hash(const TrainConfig& cfg) {
    const std::string text = dump_config(cfg);
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace emostyle
