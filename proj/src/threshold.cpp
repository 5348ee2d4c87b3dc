// SPDX-License-Identifier: Apache-2.0
#include "slotmerge/threshold.hpp"

#include <algorithm>
#include <cmath>

namespace slotmerge {

double OverlapHistogram::transformed(std::size_t bin) const {
    return std::log1p(counts[bin]);
}

OverlapHistogram histogram_overlaps(std::span<const double> samples) {
    OverlapHistogram hist;
    for (double s : samples) {
        const double clamped = std::clamp(s, 0.0, 1.0);
        std::size_t bin = static_cast<std::size_t>(clamped * kOverlapHistogramBins);
        if (bin >= kOverlapHistogramBins) bin = kOverlapHistogramBins - 1;
        hist.counts[bin] += 1.0;
    }
    return hist;
}

std::size_t triangle_threshold_bin(const OverlapHistogram& hist) {
    const std::size_t bins = kOverlapHistogramBins;

    std::size_t first_nonzero = bins, last_nonzero = bins;
    for (std::size_t b = 0; b < bins; ++b) {
        if (hist.counts[b] > 0.0) {
            if (first_nonzero == bins) first_nonzero = b;
            last_nonzero = b;
        }
    }
    if (first_nonzero == bins || first_nonzero == last_nonzero)
        throw DegenerateHistogramError("triangle threshold needs at least two nonzero bins");

    std::size_t peak = first_nonzero;
    for (std::size_t b = first_nonzero; b <= last_nonzero; ++b)
        if (hist.counts[b] > hist.counts[peak]) peak = b;

    // Longer tail = more bins between the peak and the farthest nonzero bin
    // on that side; ties go to the right (higher-IoU) tail.
    const std::size_t left_len = peak - first_nonzero;
    const std::size_t right_len = last_nonzero - peak;
    const std::size_t tail_end = right_len >= left_len ? last_nonzero : first_nonzero;

    const std::size_t lo = std::min(peak, tail_end);
    const std::size_t hi = std::max(peak, tail_end);
    if (hi - lo < 2)
        throw DegenerateHistogramError("triangle threshold: no bin between peak and tail end");

    // Perpendicular distance from (b, h_b) to the peak->tail line, in raw
    // (bin index, transformed count) coordinates.
    const double x0 = static_cast<double>(peak), y0 = hist.transformed(peak);
    const double x1 = static_cast<double>(tail_end), y1 = hist.transformed(tail_end);
    const double dx = x1 - x0, dy = y1 - y0;
    const double norm = std::sqrt(dx * dx + dy * dy);

    std::size_t best_bin = lo + 1;
    double best_dist = -1.0;
    for (std::size_t b = lo + 1; b < hi; ++b) {
        const double d = std::fabs(dy * (static_cast<double>(b) - x0) -
                                   dx * (hist.transformed(b) - y0)) /
                         norm;
        if (d > best_dist) {
            best_dist = d;
            best_bin = b;
        }
    }
    return best_bin;
}

double triangle_threshold(const OverlapHistogram& hist) {
    return OverlapHistogram::bin_center(triangle_threshold_bin(hist));
}

TauAggregation parse_aggregation(const std::string& name) {
    if (name == "mean") return TauAggregation::kMean;
    if (name == "mean-minus-std") return TauAggregation::kMeanMinusStd;
    throw UsageError("unknown aggregation: " + name);
}

std::string aggregation_name(TauAggregation agg) {
    return agg == TauAggregation::kMean ? "mean" : "mean-minus-std";
}

ThresholdEstimate estimate_tau(const std::vector<std::vector<double>>& per_batch_samples,
                               TauAggregation aggregation) {
    if (per_batch_samples.empty())
        throw CalibrationError("estimate_tau: no batches");
    ThresholdEstimate estimate;
    estimate.aggregation = aggregation;
    for (const auto& samples : per_batch_samples) {
        estimate.n_samples += samples.size();
        try {
            estimate.candidates.push_back(triangle_threshold(histogram_overlaps(samples)));
        } catch (const DegenerateHistogramError&) {
            // skipped; surfaced below if every batch degenerates
        }
    }
    if (estimate.candidates.empty())
        throw CalibrationError("estimate_tau: all batch histograms are degenerate");

    const double n = static_cast<double>(estimate.candidates.size());
    double mean = 0.0;
    for (double c : estimate.candidates) mean += c;
    mean /= n;
    double tau = mean;
    if (aggregation == TauAggregation::kMeanMinusStd) {
        double var = 0.0;
        for (double c : estimate.candidates) var += (c - mean) * (c - mean);
        var /= n;  // population variance over the candidate set
        tau = mean - std::sqrt(var);
    }
    estimate.tau = std::clamp(tau, 0.0, 1.0);
    return estimate;
}

}  // namespace slotmerge
