#include "nsp/config.hpp"

#include <fstream>
#include <sstream>

namespace nsp {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

[[noreturn]] void fail(int line, const std::string& key,
                       const std::string& what) {
    std::ostringstream msg;
    msg << "config error at line " << line << ", key '" << key << "': "
        << what;
    throw ConfigError(msg.str());
}

int parse_int(int line, const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        int v = std::stoi(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        fail(line, key, "expected an integer, got '" + value + "'");
    }
}

double parse_real(int line, const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        fail(line, key, "expected a number, got '" + value + "'");
    }
}

bool parse_bool(int line, const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    fail(line, key, "expected true/false, got '" + value + "'");
}

}  // namespace

RunConfig default_run_config() {
    RunConfig config;
    config.experiment.methods = {MethodConfig{}};
    config.experiment.methods[0].method = Method::Seq;
    MethodConfig nsp2;
    nsp2.method = Method::Nsp2;
    config.experiment.methods.push_back(nsp2);
    config.experiment.seeds = {1, 2, 3};
    return config;
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig config = default_run_config();
    ExperimentConfig& exp = config.experiment;
    MethodConfig shared;  // hyperparameters shared by all listed methods
    std::vector<std::string> method_names = {"seq", "nsp2"};

    std::istringstream in(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = raw;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            fail(line_no, line, "expected key=value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));

        if (key == "stream.image_size") {
            exp.stream.image_size = parse_int(line_no, key, value);
        } else if (key == "stream.patch_size") {
            exp.stream.patch_size = parse_int(line_no, key, value);
        } else if (key == "stream.classes_per_task") {
            exp.stream.classes_per_task = parse_int(line_no, key, value);
        } else if (key == "stream.tasks") {
            exp.stream.num_tasks = parse_int(line_no, key, value);
        } else if (key == "stream.train_per_class") {
            exp.stream.train_per_class = parse_int(line_no, key, value);
        } else if (key == "stream.test_per_class") {
            exp.stream.test_per_class = parse_int(line_no, key, value);
        } else if (key == "stream.prototype_scale") {
            exp.stream.prototype_scale = parse_real(line_no, key, value);
        } else if (key == "stream.noise_scale") {
            exp.stream.noise_scale = parse_real(line_no, key, value);
        } else if (key == "model.dim") {
            exp.model.dim = parse_int(line_no, key, value);
        } else if (key == "model.heads") {
            exp.model.heads = parse_int(line_no, key, value);
        } else if (key == "model.layers") {
            exp.model.layers = parse_int(line_no, key, value);
        } else if (key == "model.prompts") {
            exp.model.prompts = parse_int(line_no, key, value);
        } else if (key == "model.ln_eps") {
            exp.model.ln_eps = parse_real(line_no, key, value);
        } else if (key == "pretrain.epochs") {
            exp.pretrain_epochs = parse_int(line_no, key, value);
        } else if (key == "pretrain.classes") {
            exp.pretrain_classes = parse_int(line_no, key, value);
        } else if (key == "pretrain.lr") {
            exp.pretrain_lr = parse_real(line_no, key, value);
        } else if (key == "train.lr") {
            shared.lr = parse_real(line_no, key, value);
        } else if (key == "train.epochs") {
            shared.epochs = parse_int(line_no, key, value);
        } else if (key == "train.batch_size") {
            shared.batch_size = parse_int(line_no, key, value);
        } else if (key == "train.tau") {
            shared.tau = parse_real(line_no, key, value);
        } else if (key == "train.head_decay") {
            shared.head_decay = parse_real(line_no, key, value);
            if (shared.head_decay < 0)
                fail(line_no, key, "head_decay must be >= 0");
        } else if (key == "train.optimizer") {
            if (value == "sgd") {
                shared.use_adam = false;
            } else if (value == "adam") {
                shared.use_adam = true;
            } else {
                fail(line_no, key, "expected sgd or adam, got '" + value + "'");
            }
        } else if (key == "proj.nullity_mode") {
            if (value == "adaptive") {
                shared.nullity_mode = NullityMode::Adaptive;
            } else if (value == "gamma") {
                shared.nullity_mode = NullityMode::Gamma;
            } else if (value == "exact_zero") {
                shared.nullity_mode = NullityMode::ExactZero;
            } else {
                fail(line_no, key,
                     "expected adaptive, gamma or exact_zero, got '" + value +
                         "'");
            }
        } else if (key == "proj.gamma") {
            shared.gamma = parse_real(line_no, key, value);
            if (shared.gamma < 1.0) fail(line_no, key, "gamma must be >= 1");
        } else if (key == "proj.eta1") {
            shared.eta1 = parse_real(line_no, key, value);
        } else if (key == "proj.eta2") {
            shared.eta2 = parse_real(line_no, key, value);
        } else if (key == "proj.j_subsample") {
            shared.j_subsample = parse_int(line_no, key, value);
        } else if (key == "proj.audit") {
            shared.audit_residuals = parse_bool(line_no, key, value);
        } else if (key == "lnloss.coeff") {
            shared.lnloss_coeff = parse_real(line_no, key, value);
        } else if (key == "run.methods") {
            method_names = split_list(value);
            if (method_names.empty())
                fail(line_no, key, "expected at least one method");
        } else if (key == "run.seeds") {
            exp.seeds.clear();
            for (const auto& s : split_list(value))
                exp.seeds.push_back(
                    static_cast<std::uint64_t>(parse_int(line_no, key, s)));
            if (exp.seeds.empty())
                fail(line_no, key, "expected at least one seed");
        } else if (key == "run.output_dir") {
            config.output_dir = value;
        } else {
            fail(line_no, key, "unknown key");
        }
        if ((key == "proj.eta1" && (shared.eta1 < 0 || shared.eta1 > 1)) ||
            (key == "proj.eta2" && (shared.eta2 < 0 || shared.eta2 > 1))) {
            fail(line_no, key, "eta must be in [0, 1]");
        }
    }

    // The backbone consumes exactly the generated images.
    exp.model.image_size = exp.stream.image_size;
    exp.model.patch_size = exp.stream.patch_size;

    exp.methods.clear();
    for (const auto& name : method_names) {
        MethodConfig mc = shared;
        if (!parse_method(name, &mc.method)) {
            throw ConfigError("config error: unknown method '" + name +
                              "' in run.methods");
        }
        exp.methods.push_back(mc);
    }
    return config;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config error: cannot open '" + path + "'");
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_config_text(buffer.str());
}

std::string render_config(const RunConfig& config) {
    const ExperimentConfig& exp = config.experiment;
    require(!exp.methods.empty(), "render_config: no methods configured");
    const MethodConfig& shared = exp.methods.front();
    std::ostringstream out;
    out.precision(17);
    out << "stream.image_size = " << exp.stream.image_size << "\n"
        << "stream.patch_size = " << exp.stream.patch_size << "\n"
        << "stream.classes_per_task = " << exp.stream.classes_per_task << "\n"
        << "stream.tasks = " << exp.stream.num_tasks << "\n"
        << "stream.train_per_class = " << exp.stream.train_per_class << "\n"
        << "stream.test_per_class = " << exp.stream.test_per_class << "\n"
        << "stream.prototype_scale = " << exp.stream.prototype_scale << "\n"
        << "stream.noise_scale = " << exp.stream.noise_scale << "\n"
        << "model.dim = " << exp.model.dim << "\n"
        << "model.heads = " << exp.model.heads << "\n"
        << "model.layers = " << exp.model.layers << "\n"
        << "model.prompts = " << exp.model.prompts << "\n"
        << "model.ln_eps = " << exp.model.ln_eps << "\n"
        << "pretrain.epochs = " << exp.pretrain_epochs << "\n"
        << "pretrain.classes = " << exp.pretrain_classes << "\n"
        << "pretrain.lr = " << exp.pretrain_lr << "\n"
        << "train.lr = " << shared.lr << "\n"
        << "train.epochs = " << shared.epochs << "\n"
        << "train.batch_size = " << shared.batch_size << "\n"
        << "train.tau = " << shared.tau << "\n"
        << "train.head_decay = " << shared.head_decay << "\n"
        << "train.optimizer = " << (shared.use_adam ? "adam" : "sgd") << "\n";
    out << "proj.nullity_mode = ";
    switch (shared.nullity_mode) {
        case NullityMode::Adaptive: out << "adaptive"; break;
        case NullityMode::Gamma: out << "gamma"; break;
        case NullityMode::ExactZero: out << "exact_zero"; break;
    }
    out << "\n"
        << "proj.gamma = " << shared.gamma << "\n"
        << "proj.eta1 = " << shared.eta1 << "\n"
        << "proj.eta2 = " << shared.eta2 << "\n"
        << "proj.j_subsample = " << shared.j_subsample << "\n"
        << "proj.audit = " << (shared.audit_residuals ? "true" : "false")
        << "\n"
        << "lnloss.coeff = " << shared.lnloss_coeff << "\n";
    out << "run.methods = ";
    for (std::size_t i = 0; i < exp.methods.size(); ++i) {
        if (i) out << ",";
        out << method_name(exp.methods[i].method);
    }
    out << "\n"
        << "run.seeds = ";
    for (std::size_t i = 0; i < exp.seeds.size(); ++i) {
        if (i) out << ",";
        out << exp.seeds[i];
    }
    out << "\n"
        << "run.output_dir = " << config.output_dir << "\n";
    return out.str();
}

}  // namespace nsp
