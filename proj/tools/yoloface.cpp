#include <CLI11.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstring>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <set>
#include <thread>

#include "yoloface/yoloface.hpp"

namespace fs = std::filesystem;
using namespace yoloface;

namespace {

enum Exit { ok = 0, usage = 1, data = 2, internal = 3 };

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ModelOptions {
    std::string config_path;
    std::string preset_name;
    std::string weights_path;
    std::uint64_t seed = 0;
};

void add_model_options(CLI::App* cmd, ModelOptions& o)
{
    cmd->add_option("--config", o.config_path, "Model config JSON")->check(CLI::ExistingFile);
    cmd->add_option("--preset", o.preset_name, "Named model preset (default yolov5s)");
    cmd->add_option("--weights", o.weights_path, "YFTA weight archive; seeded random weights when omitted")
        ->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "Seed for random weights");
}

ModelConfig resolve_config(const ModelOptions& o)
{
    if (!o.config_path.empty() && !o.preset_name.empty()) throw UsageError("--config and --preset are exclusive");
    if (!o.config_path.empty()) {
        std::ifstream is(o.config_path);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(is);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(o.config_path, 0, e.what());
        }
        return model_config_from_json(j);
    }
    return preset(o.preset_name.empty() ? "yolov5s" : o.preset_name).config;
}

Model load_or_init(const ModelConfig& cfg, const ModelOptions& o)
{
    if (!o.weights_path.empty()) return load_model(cfg, load_file(o.weights_path));
    SeededSource src(o.seed);
    return Model::build(cfg, src);
}

int thread_cap()
{
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("YOLOFACE_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return static_cast<int>(std::min<unsigned>(hw, static_cast<unsigned>(n)));
    }
    return static_cast<int>(hw);
}

// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <class Fn>
void parallel_for(std::size_t n, int threads, Fn fn)
{
    const auto workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex m;
    std::exception_ptr first;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            try {
                for (std::size_t i; (i = next++) < n;) fn(i);
            } catch (...) {
                const std::lock_guard lock(m);
                if (!first) first = std::current_exception();
                next = n;
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first) std::rethrow_exception(first);
}

std::optional<Image> read_image(const fs::path& p)
{
    const cv::Mat bgr = cv::imread(p.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) return std::nullopt;
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    Image img(rgb.cols, rgb.rows);
    for (int y = 0; y < rgb.rows; ++y) std::memcpy(img.px(0, y), rgb.ptr(y), static_cast<std::size_t>(rgb.cols) * 3);
    return img;
}

bool is_image(const fs::path& p)
{
    static const std::set<std::string> exts{".jpg", ".jpeg", ".png", ".bmp", ".ppm", ".pgm", ".tif", ".tiff", ".webp"};
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return exts.contains(e);
}

std::vector<fs::path> expand_inputs(const std::vector<std::string>& inputs)
{
    std::vector<fs::path> out;
    for (const auto& in : inputs) {
        if (fs::is_directory(in)) {
            std::vector<fs::path> found;
            for (const auto& e : fs::recursive_directory_iterator(in)) {
                if (e.is_regular_file() && is_image(e.path())) found.push_back(e.path());
            }
            std::sort(found.begin(), found.end());
            out.insert(out.end(), found.begin(), found.end());
        } else {
            out.emplace_back(in);
        }
    }
    return out;
}

nlohmann::json detection_json(const Detection& d)
{
    nlohmann::json lm = nlohmann::json::array();
    for (const auto& p : d.landmarks) lm.push_back({p.x, p.y});
    return {{"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}}, {"conf", d.score}, {"landmarks", lm}};
}

void draw(const fs::path& out, const Image& img, const std::vector<Detection>& dets)
{
    cv::Mat rgb(img.height, img.width, CV_8UC3, const_cast<std::uint8_t*>(img.pixels.data()));
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    static const cv::Scalar colors[5] = {{0, 0, 255}, {0, 255, 255}, {255, 0, 255}, {0, 255, 0}, {255, 0, 0}};
    for (const auto& d : dets) {
        cv::rectangle(bgr, cv::Point2f(d.box.x1, d.box.y1), cv::Point2f(d.box.x2, d.box.y2), {0, 255, 0}, 2);
        for (std::size_t k = 0; k < d.landmarks.size(); ++k) {
            cv::circle(bgr, cv::Point2f(d.landmarks[k].x, d.landmarks[k].y), 2, colors[k], cv::FILLED);
        }
    }
    if (!cv::imwrite(out.string(), bgr)) throw ConfigError("detect: cannot write " + out.string());
}

struct DetectArgs {
    ModelOptions model;
    std::vector<std::string> inputs;
    std::string output;
    std::string format = "json";
    std::string draw_dir;
    float conf = 0.5f;
    float iou = 0.5f;
    int size = 640;
};

int run_detect(const DetectArgs& a)
{
    const ModelConfig cfg = resolve_config(a.model);
    if (a.size <= 0 || a.size % cfg.max_stride() != 0) {
        throw UsageError("--size must be a positive multiple of " + std::to_string(cfg.max_stride()));
    }
    if (a.format == "widerface" && a.output.empty()) throw UsageError("--format widerface needs --output directory");
    const auto files = expand_inputs(a.inputs);
    if (files.empty()) throw UsageError("no input images");
    const Model model = load_or_init(cfg, a.model);

    PostprocessOptions opt;
    opt.conf_thr = a.conf;
    opt.iou_thr = a.iou;
    opt.num_landmarks = cfg.num_landmarks;
    opt.score_mode = cfg.score_mode;

    struct Result {
        bool ok = false;
        std::vector<Detection> dets;
    };
    std::vector<Result> results(files.size());
    parallel_for(files.size(), thread_cap(), [&](std::size_t i) {
        const auto img = read_image(files[i]);
        if (!img) return;
        const auto t = letterbox(img->width, img->height, a.size, cfg.max_stride());
        const Tensor x = image_to_tensor(apply_letterbox(*img, t));
        auto dets = postprocess(model.forward(x), cfg.anchors, t, opt);
        for (const auto& d : dets) {
            const std::array<float, 4> b{d.box.x1, d.box.y1, d.box.x2, d.box.y2};
            if (!std::all_of(b.begin(), b.end(), [](float v) { return std::isfinite(v); }) || !std::isfinite(d.score)) {
                throw NonFiniteError("detect: non-finite detection for " + files[i].string());
            }
        }
        if (!a.draw_dir.empty()) draw(fs::path(a.draw_dir) / (files[i].stem().string() + ".png"), *img, dets);
        results[i] = {true, std::move(dets)};
    });
    // Records are emitted in input order regardless of completion order.
    std::size_t good = 0;
    for (std::size_t i = 0; i < files.size(); ++i) {
        if (!results[i].ok) std::cerr << "warning: skipping unreadable image " << files[i].string() << '\n';
        good += results[i].ok;
    }
    if (good == 0) {
        std::cerr << "error: no readable images\n";
        return Exit::data;
    }

    if (a.format == "widerface") {
        fs::create_directories(a.output);
        for (std::size_t i = 0; i < files.size(); ++i) {
            if (!results[i].ok) continue;
            std::vector<ScoredBox> boxes;
            for (const auto& d : results[i].dets) boxes.push_back({d.box, d.score});
            std::ofstream os(fs::path(a.output) / (files[i].stem().string() + ".txt"));
            write_prediction_file(os, files[i].filename().string(), boxes);
        }
        return Exit::ok;
    }
    std::ofstream file;
    if (!a.output.empty()) {
        file.open(a.output);
        if (!file) throw ConfigError("detect: cannot write " + a.output);
    }
    std::ostream& os = a.output.empty() ? std::cout : file;
    for (std::size_t i = 0; i < files.size(); ++i) {
        if (!results[i].ok) continue;
        nlohmann::json faces = nlohmann::json::array();
        for (const auto& d : results[i].dets) faces.push_back(detection_json(d));
        os << nlohmann::json{{"image", files[i].string()}, {"faces", faces}}.dump() << '\n';
    }
    return Exit::ok;
}

struct EvalArgs {
    std::string predictions;
    std::string gt;
    std::string easy, medium, hard;
    std::string output;
    std::string csv;
    double iou = 0.5;
};

int run_eval(const EvalArgs& a)
{
    std::ifstream gs(a.gt);
    if (!gs) throw ConfigError("eval: cannot read " + a.gt);
    const AnnotationMap gt = parse_widerface(gs, a.gt);
    const SubsetList all = all_faces(gt);
    const auto subset = [&](const std::string& p) { return p.empty() ? all : load_subset_list(p); };
    const Subsets subsets{subset(a.easy), subset(a.medium), subset(a.hard)};
    EvalConfig ec;
    ec.iou_thr = a.iou;
    const EvalReport r = evaluate_widerface(load_prediction_dir(a.predictions), gt, subsets, ec);
    const std::string text = r.to_json().dump(2);
    if (a.output.empty()) {
        std::cout << text << '\n';
    } else {
        std::ofstream(a.output) << text << '\n';
    }
    if (!a.csv.empty()) {
        std::ofstream cs(a.csv);
        r.write_csv(cs);
    }
    std::cerr << std::fixed << std::setprecision(4) << "easy " << r.easy.ap << "  medium " << r.medium.ap << "  hard "
              << r.hard.ap << '\n';
    return Exit::ok;
}

std::string shapes_str(const std::vector<Shape>& s)
{
    std::string out;
    for (const auto& x : s) out += (out.empty() ? "" : " ") + x.str();
    return out;
}

nlohmann::json reconciliation(const Preset& p, const ModelConfig& cfg, int size)
{
    const double params_m = static_cast<double>(count_params(cfg)) / 1e6;
    nlohmann::json j{{"preset", p.name}, {"params_m", params_m}, {"flops_g", count_flops(cfg, size) / 1e9}};
    if (p.target) {
        const double rel = params_m / p.target->params_m - 1.0;
        j["target_params_m"] = p.target->params_m;
        j["target_flops_g"] = p.target->flops_g;
        j["rel_diff"] = rel;
        j["tolerance"] = p.target->tolerance;
        j["status"] = std::abs(rel) <= p.target->tolerance ? "PASS" : "FAIL";
    }
    return j;
}

void print_reconciliation_row(std::ostream& os, const nlohmann::json& r)
{
    os << std::left << std::setw(15) << r["preset"].get<std::string>() << std::right << std::fixed
       << std::setprecision(3) << std::setw(10) << r["params_m"].get<double>();
    if (r.contains("status")) {
        os << std::setw(10) << r["target_params_m"].get<double>() << std::showpos << std::setw(9)
           << 100 * r["rel_diff"].get<double>() << '%' << std::noshowpos << "  +-" << std::setprecision(0)
           << 100 * r["tolerance"].get<double>() << "%  " << std::setprecision(2) << std::setw(8)
           << r["flops_g"].get<double>() << std::setw(9) << r["target_flops_g"].get<double>() << "  "
           << r["status"].get<std::string>();
    }
    os << '\n';
}

void print_reconciliation_header(std::ostream& os)
{
    os << "reconciliation (params in M, FLOPs in G at the input size; FLOPs report-only)\n"
       << std::left << std::setw(15) << "model" << std::right << std::setw(10) << "params" << std::setw(10)
       << "target" << std::setw(10) << "diff" << "  tol    " << std::setw(8) << "flops" << std::setw(9) << "target"
       << "  status\n";
}

struct InfoArgs {
    ModelOptions model;
    int size = 640;
    std::string format = "table";
    std::string output;
    bool all = false;
};

int run_info(const InfoArgs& a)
{
    std::ofstream file;
    if (!a.output.empty()) {
        file.open(a.output);
        if (!file) throw ConfigError("info: cannot write " + a.output);
    }
    std::ostream& os = a.output.empty() ? std::cout : file;

    if (a.all) {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& p : presets()) rows.push_back(reconciliation(p, p.config, a.size));
        if (a.format == "json") {
            os << nlohmann::json{{"input_size", a.size}, {"reconciliation", rows}}.dump(2) << '\n';
        } else {
            print_reconciliation_header(os);
            for (const auto& r : rows) print_reconciliation_row(os, r);
        }
        bool pass = true;
        for (const auto& r : rows) pass = pass && r.value("status", "PASS") == "PASS";
        return pass ? Exit::ok : Exit::data;
    }

    const ModelConfig cfg = resolve_config(a.model);
    if (a.size <= 0 || a.size % cfg.max_stride() != 0) {
        throw UsageError("--size must be a positive multiple of " + std::to_string(cfg.max_stride()));
    }
    const ModelSummary s = summarize(make_plan(cfg), a.size, a.size);
    const Preset* p = match_preset(cfg);
    nlohmann::json j{{"backbone", to_string(cfg.backbone)},
                     {"depth_multiple", cfg.depth_multiple},
                     {"width_multiple", cfg.width_multiple},
                     {"use_p6", cfg.use_p6},
                     {"use_stem", cfg.use_stem},
                     {"input_size", a.size},
                     {"params", s.params},
                     {"flops", s.flops},
                     {"flops_convention", "2 per multiply-accumulate, plus bias/BN and activation terms"},
                     {"config_hash", config_hash(cfg)}};
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : s.layers) {
        nlohmann::json shapes = nlohmann::json::array();
        for (const auto& sh : l.out_shapes) shapes.push_back({sh.n, sh.c, sh.h, sh.w});
        layers.push_back(
            {{"index", l.index}, {"kind", l.kind}, {"from", l.from}, {"out_shapes", shapes}, {"params", l.params}, {"flops", l.flops}});
    }
    j["layers"] = layers;
    if (p) j["reconciliation"] = reconciliation(*p, cfg, a.size);

    if (a.format == "json") {
        os << j.dump(2) << '\n';
        return Exit::ok;
    }
    os << "model: " << (p ? p->name : "custom") << "  backbone " << to_string(cfg.backbone) << "  D " << cfg.depth_multiple
       << "  W " << cfg.width_multiple << "  P6 " << (cfg.use_p6 ? "yes" : "no") << "  input " << a.size << "x" << a.size
       << '\n';
    os << std::right << std::setw(4) << "idx" << "  " << std::left << std::setw(16) << "layer" << std::setw(12) << "from"
       << std::right << std::setw(12) << "params" << std::setw(14) << "flops" << "  output\n";
    for (const auto& l : s.layers) {
        std::string from;
        for (int f : l.from) from += (from.empty() ? "" : ",") + std::to_string(f);
        os << std::right << std::setw(4) << l.index << "  " << std::left << std::setw(16) << l.kind << std::setw(12) << from
           << std::right << std::setw(12) << l.params << std::setw(14) << l.flops << "  " << shapes_str(l.out_shapes)
           << '\n';
    }
    os << std::fixed << std::setprecision(3) << "total params " << s.params / 1e6 << " M, flops "
       << std::setprecision(2) << s.flops / 1e9 << " G\n";
    if (p) {
        print_reconciliation_header(os);
        print_reconciliation_row(os, j["reconciliation"]);
    }
    return Exit::ok;
}

struct BenchArgs {
    ModelOptions model;
    int size = 640;
    int iters = 10;
    int warmup = 2;
    std::string output;
};

int run_bench(const BenchArgs& a)
{
    const ModelConfig cfg = resolve_config(a.model);
    if (a.size <= 0 || a.size % cfg.max_stride() != 0) {
        throw UsageError("--size must be a positive multiple of " + std::to_string(cfg.max_stride()));
    }
    const Model model = load_or_init(cfg, a.model);
    const Tensor x(Shape{1, 3, a.size, a.size}, 114.0f / 255.0f);
    for (int i = 0; i < a.warmup; ++i) model.forward(x);
    std::vector<double> ms;
    for (int i = 0; i < a.iters; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto y = model.forward(x);
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        if (y.empty()) throw Error("bench: empty forward output");
    }
    auto sorted = ms;
    std::sort(sorted.begin(), sorted.end());
    // Nearest-rank percentile.
    const auto pct = [&](double q) {
        const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(sorted.size())));
        return sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
    };
    double mean = 0;
    for (double v : ms) mean += v;
    mean /= static_cast<double>(ms.size());
    const nlohmann::json j{{"model", match_preset(cfg) ? match_preset(cfg)->name : "custom"},
                           {"input_size", a.size},
                           {"iters", a.iters},
                           {"warmup", a.warmup},
                           {"samples_ms", ms},
                           {"p50_ms", pct(0.5)},
                           {"p95_ms", pct(0.95)},
                           {"mean_ms", mean},
                           {"images_per_second", 1000.0 / mean}};
    if (a.output.empty()) {
        std::cout << j.dump(2) << '\n';
    } else {
        std::ofstream(a.output) << j.dump(2) << '\n';
    }
    return Exit::ok;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"YOLOv5-face style detector: detect, eval, info, bench"};
    app.require_subcommand(1);

    DetectArgs det;
    auto* detect = app.add_subcommand("detect", "Detect faces and landmarks in images");
    add_model_options(detect, det.model);
    detect->add_option("--input", det.inputs, "Image files or directories")->required();
    detect->add_option("--output", det.output, "JSON-lines file (stdout when omitted), or directory for widerface");
    detect->add_option("--conf", det.conf, "Score threshold")->check(CLI::Range(0.0, 1.0));
    detect->add_option("--iou", det.iou, "NMS IoU threshold")->check(CLI::Range(0.0, 1.0));
    detect->add_option("--format", det.format, "Output format")->check(CLI::IsMember({"json", "widerface"}));
    detect->add_option("--size", det.size, "Letterbox target (longer edge)");
    detect->add_option("--draw", det.draw_dir, "Directory for annotated images")->check(CLI::ExistingDirectory);

    EvalArgs ev;
    auto* eval = app.add_subcommand("eval", "Evaluate WiderFace-layout predictions");
    eval->add_option("--input", ev.predictions, "Prediction directory")->required();
    eval->add_option("--gt", ev.gt, "WiderFace annotation file")->required()->check(CLI::ExistingFile);
    eval->add_option("--easy", ev.easy, "Easy subset list (all faces when omitted)")->check(CLI::ExistingFile);
    eval->add_option("--medium", ev.medium, "Medium subset list")->check(CLI::ExistingFile);
    eval->add_option("--hard", ev.hard, "Hard subset list")->check(CLI::ExistingFile);
    eval->add_option("--output", ev.output, "Report JSON (stdout when omitted)");
    eval->add_option("--csv", ev.csv, "Also write PR points as CSV");
    eval->add_option("--iou", ev.iou, "Match IoU threshold")->check(CLI::Range(0.0, 1.0));

    InfoArgs inf;
    auto* info = app.add_subcommand("info", "Per-layer shapes, parameter and FLOP counts");
    add_model_options(info, inf.model);
    info->add_option("--size", inf.size, "Square input size");
    info->add_option("--format", inf.format, "Output format")->check(CLI::IsMember({"table", "json"}));
    info->add_option("--output", inf.output, "Write to file instead of stdout");
    info->add_flag("--all", inf.all, "Reconciliation table for every preset");

    BenchArgs bn;
    auto* bench = app.add_subcommand("bench", "Forward-pass latency on a synthetic image");
    add_model_options(bench, bn.model);
    bench->add_option("--size", bn.size, "Square input size");
    bench->add_option("--iters", bn.iters, "Timed iterations")->check(CLI::PositiveNumber);
    bench->add_option("--warmup", bn.warmup, "Untimed iterations")->check(CLI::NonNegativeNumber);
    bench->add_option("--output", bn.output, "Write JSON to file instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? Exit::ok : Exit::usage;
    }

    try {
        if (*detect) return run_detect(det);
        if (*eval) return run_eval(ev);
        if (*info) return run_info(inf);
        if (*bench) return run_bench(bn);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return Exit::usage;
    } catch (const NonFiniteError& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return Exit::internal;
    } catch (const ParseError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return Exit::data;
    } catch (const ArchiveError& e) {
        std::cerr << "weights error: " << e.what() << '\n';
        return Exit::data;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return Exit::data;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return Exit::internal;
    }
    return Exit::internal;
}
