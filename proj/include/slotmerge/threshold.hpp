// SPDX-License-Identifier: Apache-2.0
//
// Data-driven merge-threshold estimation. Pairwise Soft-IoU samples are
// collected per batch, binned into a 100-bin histogram over [0,1],
// log-transformed with ln(1+count), and a candidate threshold is extracted
// per batch with the triangle method: draw the line from the histogram peak
// to the farthest nonzero bin on the longer tail and take the bin of maximum
// perpendicular distance, strictly between the endpoints. Candidates are
// aggregated by mean or mean-minus-std.
#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "slotmerge/errors.hpp"

namespace slotmerge {

inline constexpr std::size_t kOverlapHistogramBins = 100;

struct OverlapHistogram {
    std::array<double, kOverlapHistogramBins> counts{};

    // ln(1 + count); the +1 keeps empty bins finite.
    double transformed(std::size_t bin) const;
    static double bin_center(std::size_t bin) {
        return (static_cast<double>(bin) + 0.5) / static_cast<double>(kOverlapHistogramBins);
    }
};

// Bins samples (clamped to [0,1]; 1.0 lands in the last bin).
OverlapHistogram histogram_overlaps(std::span<const double> samples);

// Index of the triangle-method bin. Distances are measured in raw
// (bin index, transformed count) coordinates. Throws
// DegenerateHistogramError when fewer than two nonzero bins exist or no bin
// lies strictly between the chosen endpoints.
std::size_t triangle_threshold_bin(const OverlapHistogram& hist);

// Center of the triangle-method bin.
double triangle_threshold(const OverlapHistogram& hist);

enum class TauAggregation { kMean, kMeanMinusStd };

TauAggregation parse_aggregation(const std::string& name);  // "mean" | "mean-minus-std"
std::string aggregation_name(TauAggregation agg);

struct ThresholdEstimate {
    std::vector<double> candidates;  // per-batch triangle thresholds
    TauAggregation aggregation = TauAggregation::kMean;
    double tau = 0.0;  // clamped to [0,1]
    std::size_t n_samples = 0;
};

// Aggregates per-batch candidate thresholds; batches whose histograms are
// degenerate are skipped, and an error is raised only when all of them are.
ThresholdEstimate estimate_tau(const std::vector<std::vector<double>>& per_batch_samples,
                               TauAggregation aggregation);

// Reference thresholds reported for the four public benchmarks (VOC, COCO,
// MOVi-C, MOVi-E); recorded for comparison only, never asserted.
inline constexpr double kReferenceTauVoc = 0.036;
inline constexpr double kReferenceTauCoco = 0.04;
inline constexpr double kReferenceTauMoviC = 0.035;
inline constexpr double kReferenceTauMoviE = 0.019;

}  // namespace slotmerge
