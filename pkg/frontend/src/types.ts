/** Payload shapes of the review API. Field names mirror the JSON exactly. */

export type Decision = 'ctc' | 'non-ctc' | 'artefact';

export const DECISIONS: readonly Decision[] = ['ctc', 'non-ctc', 'artefact'];

export interface SlideSummary {
  slide_id: string;
  candidate_count: number;
}

export interface CandidateSummary {
  id: string;
  probability: number | null;
  rule_pass: boolean;
  fov: [number, number];
  thumbnail: string;
  /** effective decision per reviewer */
  verdicts: Record<string, Decision>;
}

export interface CandidatePage {
  slide_id: string;
  page: number;
  page_size: number;
  total: number;
  total_pages: number;
  candidates: CandidateSummary[];
}

export interface VerdictRecord {
  candidate_id: string;
  decision: Decision;
  reviewer: string;
  ts: string;
  effective: boolean;
}

export interface MfiBlock {
  nuc: Record<string, number>;
  cell: Record<string, number>;
}

export interface CandidateDetail {
  id: string;
  slide_id: string;
  fov: [number, number];
  centroid: [number, number];
  probability: number | null;
  rule_pass: boolean;
  label: string;
  mfi: MfiBlock;
  images: Record<string, string>;
  verdicts: VerdictRecord[];
}

export interface ReviewerProgress {
  reviewed: number;
  total: number;
  progress: number;
}

export interface ReviewReport {
  slide_id: string;
  candidate_count: number;
  confirmed: Record<Decision, number>;
  per_reviewer: Record<string, ReviewerProgress>;
  disagreements: string[];
}
