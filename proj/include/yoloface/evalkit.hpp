#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "yoloface/datapipe.hpp"
#include "yoloface/detect.hpp"

namespace yoloface {

struct ScoredBox {
    Box box;
    float score = 0;
};

enum class MatchFlag { tp, fp, ignore };

struct EvalConfig {
    double iou_thr = 0.5;
    int num_thresholds = 1000;

    void validate() const
    {
        if (!(iou_thr > 0 && iou_thr < 1)) throw ConfigError("eval: iou_thr must lie in (0, 1)");
        if (num_thresholds < 1) throw ConfigError("eval: num_thresholds must be >= 1");
    }
};

/// Greedy matching. Predictions are visited by descending score (stable); each takes the
/// still-unmatched GT with the highest IoU >= iou_thr (lowest index on ties). A GT flagged
/// `ignore` absorbs its match, and the prediction is flagged ignore instead of TP.
/// Flags are returned in input order.
inline std::vector<MatchFlag> match(const std::vector<ScoredBox>& preds, const std::vector<Box>& gts,
                                    const std::vector<bool>& ignore, double iou_thr)
{
    if (!ignore.empty() && ignore.size() != gts.size()) throw ShapeError("match: ignore flags must align with GTs");
    std::vector<std::size_t> order(preds.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });
    std::vector<bool> used(gts.size(), false);
    std::vector<MatchFlag> flags(preds.size(), MatchFlag::fp);
    for (std::size_t p : order) {
        double best = -1.0;
        std::size_t best_g = gts.size();
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (used[g]) continue;
            const double o = iou(preds[p].box, gts[g]);
            if (o >= iou_thr && o > best) {
                best = o;
                best_g = g;
            }
        }
        if (best_g == gts.size()) continue;
        used[best_g] = true;
        flags[p] = (!ignore.empty() && ignore[best_g]) ? MatchFlag::ignore : MatchFlag::tp;
    }
    return flags;
}

inline std::vector<MatchFlag> match(const std::vector<ScoredBox>& preds, const std::vector<Box>& gts, double iou_thr)
{
    return match(preds, gts, {}, iou_thr);
}

struct FlaggedPrediction {
    float score = 0;
    MatchFlag flag = MatchFlag::fp;
};

struct PRPoint {
    double recall = 0;
    double precision = 0;
    float score = 0; // score of the last prediction admitted at this cutoff
    std::int64_t rank = 0;
    std::int64_t tp = 0; // true positives among the first `rank` predictions
};

struct PRCurve {
    std::vector<PRPoint> points;
    std::int64_t total_gt = 0;
};

namespace detail {

/// Non-ignored predictions in descending score order (stable).
inline std::vector<FlaggedPrediction> ranked(const std::vector<FlaggedPrediction>& preds)
{
    std::vector<FlaggedPrediction> r;
    for (const auto& p : preds) {
        if (p.flag != MatchFlag::ignore) r.push_back(p);
    }
    std::stable_sort(r.begin(), r.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
    return r;
}

} // namespace detail

/// Cutoffs are spread evenly over rank positions 1..N (at most num_thresholds distinct ones).
inline PRCurve pr_curve(const std::vector<FlaggedPrediction>& preds, std::int64_t total_gt, int num_thresholds = 1000)
{
    if (total_gt < 0) throw ConfigError("pr_curve: total GT must be >= 0");
    if (num_thresholds < 1) throw ConfigError("pr_curve: num_thresholds must be >= 1");
    const auto r = detail::ranked(preds);
    PRCurve c;
    c.total_gt = total_gt;
    if (r.empty()) return c;
    if (total_gt == 0) throw ConfigError("pr_curve: predictions present but no ground-truth faces; recall undefined");
    const auto n = static_cast<std::int64_t>(r.size());
    std::vector<std::int64_t> cum_tp(static_cast<std::size_t>(n));
    std::int64_t tp = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        if (r[static_cast<std::size_t>(i)].flag == MatchFlag::tp) ++tp;
        cum_tp[static_cast<std::size_t>(i)] = tp;
    }
    std::int64_t last = 0;
    for (int k = 1; k <= num_thresholds; ++k) {
        const std::int64_t pos = (static_cast<std::int64_t>(k) * n + num_thresholds - 1) / num_thresholds;
        if (pos == last) continue;
        last = pos;
        const std::int64_t tp_at = cum_tp[static_cast<std::size_t>(pos - 1)];
        const auto t = static_cast<double>(tp_at);
        c.points.push_back({t / static_cast<double>(total_gt), t / static_cast<double>(pos),
                            r[static_cast<std::size_t>(pos - 1)].score, pos, tp_at});
    }
    return c;
}

/// Area under the precision envelope (precision made non-increasing from the right).
/// Summed as sum(delta_tp * envelope) / total_gt in extended precision so that
/// rational hand cases come out correctly rounded.
inline double average_precision(const PRCurve& c)
{
    const auto& p = c.points;
    if (p.empty() || c.total_gt <= 0) return 0.0;
    std::vector<long double> env(p.size());
    long double m = 0.0L;
    for (std::size_t i = p.size(); i-- > 0;) {
        m = std::max(m, static_cast<long double>(p[i].tp) / static_cast<long double>(p[i].rank));
        env[i] = m;
    }
    long double area = 0.0L;
    std::int64_t prev_tp = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        area += static_cast<long double>(p[i].tp - prev_tp) * env[i];
        prev_tp = p[i].tp;
    }
    return static_cast<double>(area / static_cast<long double>(c.total_gt));
}

/// TPs accumulated before the (fp_budget + 1)-th false positive, over total GT.
inline double tpr_at_fp(const std::vector<FlaggedPrediction>& preds, std::int64_t total_gt, std::int64_t fp_budget = 1000)
{
    if (fp_budget < 0) throw ConfigError("tpr_at_fp: fp_budget must be >= 0");
    if (total_gt <= 0) return 0.0;
    std::int64_t tp = 0, fp = 0;
    for (const auto& p : detail::ranked(preds)) {
        if (p.flag == MatchFlag::fp) {
            if (++fp > fp_budget) break;
        } else {
            ++tp;
        }
    }
    return static_cast<double>(tp) / static_cast<double>(total_gt);
}

// ---------------------------------------------------------------------------
// WiderFace protocol

/// Image key shared by annotations, predictions and subset lists: file name without
/// directory or extension.
inline std::string image_key(const std::string& path)
{
    return std::filesystem::path(path).stem().string();
}

/// image key -> 1-based face indices included in a difficulty subset.
using SubsetList = std::map<std::string, std::set<int>>;

struct Subsets {
    SubsetList easy, medium, hard;
};

using PredictionMap = std::map<std::string, std::vector<ScoredBox>>;

inline Box to_box(const FaceAnnotation& f) { return {f.x, f.y, f.x + f.w, f.y + f.h}; }

struct SubsetResult {
    double ap = 0;
    PRCurve curve;
    std::vector<FlaggedPrediction> flagged;
};

struct EvalReport {
    SubsetResult easy, medium, hard;

    nlohmann::json to_json(bool with_curves = true) const
    {
        nlohmann::json j{{"easy", easy.ap}, {"medium", medium.ap}, {"hard", hard.ap}};
        if (with_curves) {
            nlohmann::json pts;
            for (const auto& [name, r] : {std::pair{"easy", &easy}, {"medium", &medium}, {"hard", &hard}}) {
                nlohmann::json arr = nlohmann::json::array();
                for (const auto& p : r->curve.points) arr.push_back({p.recall, p.precision});
                pts[name] = arr;
            }
            j["pr_points"] = pts;
        }
        return j;
    }

    void write_csv(std::ostream& os) const
    {
        os << "subset,rank,score,recall,precision\n";
        for (const auto& [name, r] : {std::pair{"easy", &easy}, {"medium", &medium}, {"hard", &hard}}) {
            for (const auto& p : r->curve.points) {
                os << name << ',' << p.rank << ',' << p.score << ',' << p.recall << ',' << p.precision << '\n';
            }
        }
    }
};

namespace detail {

inline std::map<std::string, const std::vector<FaceAnnotation>*> keyed_gt(const AnnotationMap& gt)
{
    std::map<std::string, const std::vector<FaceAnnotation>*> out;
    for (const auto& [path, faces] : gt) {
        if (!out.emplace(image_key(path), &faces).second) {
            throw ConfigError("eval: two ground-truth images share the key '" + image_key(path) + "'");
        }
    }
    return out;
}

inline SubsetResult evaluate_subset(const PredictionMap& preds,
                                    const std::map<std::string, const std::vector<FaceAnnotation>*>& gt,
                                    const SubsetList& subset, const EvalConfig& cfg)
{
    SubsetResult r;
    std::int64_t total = 0;
    static const std::set<int> none;
    for (const auto& [key, faces] : gt) {
        const auto it = subset.find(key);
        const auto& included = it == subset.end() ? none : it->second;
        std::vector<Box> boxes;
        std::vector<bool> ignore;
        for (std::size_t i = 0; i < faces->size(); ++i) {
            boxes.push_back(to_box((*faces)[i]));
            const bool in = included.contains(static_cast<int>(i) + 1);
            ignore.push_back(!in);
            if (in) ++total;
        }
        const auto pit = preds.find(key);
        if (pit == preds.end()) continue;
        const auto flags = match(pit->second, boxes, ignore, cfg.iou_thr);
        for (std::size_t i = 0; i < flags.size(); ++i) r.flagged.push_back({pit->second[i].score, flags[i]});
    }
    if (total == 0) {
        r.curve.total_gt = 0;
        return r;
    }
    r.curve = pr_curve(r.flagged, total, cfg.num_thresholds);
    r.ap = average_precision(r.curve);
    return r;
}

} // namespace detail

/// Per-subset AP; faces outside a subset are ignored (they absorb matches without counting).
inline EvalReport evaluate_widerface(const PredictionMap& preds, const AnnotationMap& gt, const Subsets& subsets,
                                     const EvalConfig& cfg = {})
{
    cfg.validate();
    const auto keyed = detail::keyed_gt(gt);
    for (const auto& [key, _] : preds) {
        if (!keyed.contains(key)) throw ConfigError("eval: no ground truth for predicted image '" + key + "'");
    }
    return {detail::evaluate_subset(preds, keyed, subsets.easy, cfg),
            detail::evaluate_subset(preds, keyed, subsets.medium, cfg),
            detail::evaluate_subset(preds, keyed, subsets.hard, cfg)};
}

/// Subset list including every face of every image.
inline SubsetList all_faces(const AnnotationMap& gt)
{
    SubsetList s;
    for (const auto& [path, faces] : gt) {
        auto& set = s[image_key(path)];
        for (std::size_t i = 0; i < faces.size(); ++i) set.insert(static_cast<int>(i) + 1);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Text formats

/// One prediction file: image name line, count line, then "x y w h score" per face.
inline std::pair<std::string, std::vector<ScoredBox>> parse_prediction_file(std::istream& in, const std::string& source)
{
    std::vector<std::string> lines;
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    std::size_t i = 0;
    const auto next = [&]() -> std::string {
        while (i < lines.size() && detail::trim(lines[i]).empty()) ++i;
        if (i == lines.size()) return {};
        return detail::trim(lines[i++]);
    };
    const std::string name = next();
    if (name.empty()) throw ParseError(source, i + 1, "missing image name line");
    const std::string count_str = next();
    std::size_t used = 0;
    long count = -1;
    try {
        count = std::stol(count_str, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (count_str.empty() || used != count_str.size() || count < 0) {
        throw ParseError(source, i, "malformed detection count '" + count_str + "'");
    }
    std::vector<ScoredBox> out;
    for (long k = 0; k < count; ++k) {
        const std::string l = next();
        if (l.empty()) throw ParseError(source, std::max<std::size_t>(i, 1), "truncated file: expected " + std::to_string(count) + " detections");
        const auto nums = detail::parse_numbers(l, source, i);
        if (nums.size() != 5) throw ParseError(source, i, "expected 'x y w h score'");
        const auto f = [&](std::size_t j) { return static_cast<float>(nums[j]); };
        out.push_back({{f(0), f(1), f(0) + f(2), f(1) + f(3)}, f(4)});
    }
    if (!next().empty()) throw ParseError(source, i, "trailing content after " + std::to_string(count) + " detections");
    return {image_key(name), std::move(out)};
}

/// Reads every *.txt under `dir` (recursively) as a prediction file.
inline PredictionMap load_prediction_dir(const std::filesystem::path& dir)
{
    if (!std::filesystem::is_directory(dir)) throw ConfigError("eval: prediction directory not found: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    PredictionMap out;
    for (const auto& f : files) {
        std::ifstream is(f);
        if (!is) throw ConfigError("eval: cannot read " + f.string());
        auto [key, boxes] = parse_prediction_file(is, f.string());
        if (out.contains(key)) throw ParseError(f.string(), 1, "duplicate predictions for image '" + key + "'");
        out[key] = std::move(boxes);
    }
    return out;
}

inline void write_prediction_file(std::ostream& os, const std::string& image_name, const std::vector<ScoredBox>& boxes)
{
    os << image_name << '\n' << boxes.size() << '\n';
    for (const auto& b : boxes) {
        os << b.box.x1 << ' ' << b.box.y1 << ' ' << b.box.width() << ' ' << b.box.height() << ' ' << b.score << '\n';
    }
}

/// Subset list text: one "image idx idx ..." line per image, 1-based face indices; '#' starts a comment.
inline SubsetList parse_subset_list(std::istream& in, const std::string& source)
{
    SubsetList out;
    std::size_t line_no = 0;
    for (std::string l; std::getline(in, l);) {
        ++line_no;
        if (const auto h = l.find('#'); h != std::string::npos) l.erase(h);
        std::istringstream ls(l);
        std::string image;
        if (!(ls >> image)) continue;
        auto& set = out[image_key(image)];
        for (std::string tok; ls >> tok;) {
            std::size_t used = 0;
            int v = 0;
            try {
                v = std::stoi(tok, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != tok.size() || v < 1) throw ParseError(source, line_no, "bad face index '" + tok + "'");
            set.insert(v);
        }
    }
    return out;
}

inline SubsetList load_subset_list(const std::filesystem::path& p)
{
    std::ifstream is(p);
    if (!is) throw ConfigError("eval: cannot read subset list " + p.string());
    return parse_subset_list(is, p.string());
}

} // namespace yoloface
